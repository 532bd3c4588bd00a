use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{Dims, DivergenceMode, DEFAULT_LEAKY_SLOPE};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WrongClassMode {
    #[default]
    Random,
    MostSimilar,
    Kmeans,
}

impl fmt::Display for WrongClassMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WrongClassMode::Random => "random",
            WrongClassMode::MostSimilar => "most_similar",
            WrongClassMode::Kmeans => "kmeans",
        })
    }
}

impl FromStr for WrongClassMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(WrongClassMode::Random),
            "most_similar" => Ok(WrongClassMode::MostSimilar),
            "kmeans" => Ok(WrongClassMode::Kmeans),
            _ => Err(Error::config(
                "wrong_class_mode",
                format!("expected random, most_similar or kmeans, got `{s}`"),
            )),
        }
    }
}

/// Loss terms and phases switched off for ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Ablation {
    pub no_wrong_class: bool,
    pub no_triplet: bool,
    pub no_reg: bool,
    pub no_gan: bool,
}

impl Ablation {
    pub const FLAGS: [&'static str; 4] = ["no_wrong_class", "no_triplet", "no_reg", "no_gan"];

    pub fn is_empty(&self) -> bool {
        *self == Ablation::default()
    }

    fn flag_mut(&mut self, name: &str) -> Option<&mut bool> {
        match name {
            "no_wrong_class" => Some(&mut self.no_wrong_class),
            "no_triplet" => Some(&mut self.no_triplet),
            "no_reg" => Some(&mut self.no_reg),
            "no_gan" => Some(&mut self.no_gan),
            _ => None,
        }
    }

    fn flags(&self) -> [bool; 4] {
        [self.no_wrong_class, self.no_triplet, self.no_reg, self.no_gan]
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on: Vec<&str> = Ablation::FLAGS
            .iter()
            .zip(self.flags())
            .filter(|(_, v)| *v)
            .map(|(n, _)| *n)
            .collect();
        if on.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&on.join("+"))
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// `none`, or flag names joined by `+` or `,`.
    fn from_str(s: &str) -> Result<Self> {
        let mut a = Ablation::default();
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(a);
        }
        for part in s.split(['+', ',']) {
            let part = part.trim();
            match a.flag_mut(part) {
                Some(f) => *f = true,
                None => {
                    return Err(Error::config(
                        "ablation",
                        format!("unknown flag `{part}` (known: {})", Ablation::FLAGS.join(", ")),
                    ))
                }
            }
        }
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub lr: f64,
    pub clip_k: f64,
    pub n_outer: usize,
    pub d_steps: usize,
    pub inner_cap: Option<usize>,
    pub batch_size: usize,
    pub d_c: usize,
    pub d_z: usize,
    pub gen_hidden: [usize; 2],
    pub disc_hidden: usize,
    pub divergence: DivergenceMode,
    pub leaky_slope: f64,
    pub rho: f64,
    pub eps: f64,
    pub seed: u64,
    pub wrong_class_mode: WrongClassMode,
    pub ablation: Ablation,
    pub joint: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let dims = Dims::new(1, 1);
        TrainConfig {
            alpha: 0.5,
            beta: 2.0,
            lambda: 2.0,
            lr: 5e-5,
            clip_k: 0.01,
            n_outer: 30,
            d_steps: 5,
            inner_cap: None,
            batch_size: 64,
            d_c: dims.d_c,
            d_z: dims.d_z,
            gen_hidden: dims.gen_hidden,
            disc_hidden: dims.disc_hidden,
            divergence: DivergenceMode::Kl,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            rho: 0.9,
            eps: 1e-8,
            seed: 0,
            wrong_class_mode: WrongClassMode::Random,
            ablation: Ablation::default(),
            joint: false,
        }
    }
}

pub const CONFIG_KEYS: [&str; 21] = [
    "alpha",
    "beta",
    "lambda",
    "lr",
    "clip_k",
    "n_outer",
    "d_steps",
    "inner_cap",
    "batch_size",
    "d_c",
    "d_z",
    "gen_hidden1",
    "gen_hidden2",
    "disc_hidden",
    "divergence",
    "leaky_slope",
    "rho",
    "eps",
    "seed",
    "wrong_class_mode",
    "ablation",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

impl TrainConfig {
    pub fn dims(&self, d_t: usize, d_i: usize) -> Dims {
        Dims {
            d_t,
            d_i,
            d_c: self.d_c,
            d_z: self.d_z,
            gen_hidden: self.gen_hidden,
            disc_hidden: self.disc_hidden,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            lambda: self.lambda,
            divergence: self.divergence,
            wrong_class: !self.ablation.no_wrong_class,
            margin: !self.ablation.no_reg,
        }
    }

    /// Inner-loop length at outer iteration `it` (1-based).
    pub fn inner_steps(&self, it: usize) -> usize {
        match self.inner_cap {
            Some(cap) => it.min(cap),
            None => it,
        }
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "clip_k" => self.clip_k = parse(key, v)?,
            "n_outer" => self.n_outer = parse(key, v)?,
            "d_steps" => self.d_steps = parse(key, v)?,
            "inner_cap" => {
                self.inner_cap = match v {
                    "" | "none" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "batch_size" => self.batch_size = parse(key, v)?,
            "d_c" => self.d_c = parse(key, v)?,
            "d_z" => self.d_z = parse(key, v)?,
            "gen_hidden1" => self.gen_hidden[0] = parse(key, v)?,
            "gen_hidden2" => self.gen_hidden[1] = parse(key, v)?,
            "disc_hidden" => self.disc_hidden = parse(key, v)?,
            "divergence" => self.divergence = v.parse()?,
            "leaky_slope" => self.leaky_slope = parse(key, v)?,
            "rho" => self.rho = parse(key, v)?,
            "eps" => self.eps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "wrong_class_mode" => self.wrong_class_mode = v.parse()?,
            "ablation" => self.ablation = v.parse()?,
            "joint" => self.joint = parse(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "lambda" => self.lambda.to_string(),
            "lr" => self.lr.to_string(),
            "clip_k" => self.clip_k.to_string(),
            "n_outer" => self.n_outer.to_string(),
            "d_steps" => self.d_steps.to_string(),
            "inner_cap" => self.inner_cap.map_or("none".into(), |c| c.to_string()),
            "batch_size" => self.batch_size.to_string(),
            "d_c" => self.d_c.to_string(),
            "d_z" => self.d_z.to_string(),
            "gen_hidden1" => self.gen_hidden[0].to_string(),
            "gen_hidden2" => self.gen_hidden[1].to_string(),
            "disc_hidden" => self.disc_hidden.to_string(),
            "divergence" => self.divergence.to_string(),
            "leaky_slope" => self.leaky_slope.to_string(),
            "rho" => self.rho.to_string(),
            "eps" => self.eps.to_string(),
            "seed" => self.seed.to_string(),
            "wrong_class_mode" => self.wrong_class_mode.to_string(),
            "ablation" => self.ablation.to_string(),
            "joint" => self.joint.to_string(),
            _ => return None,
        })
    }

    pub fn keys() -> impl Iterator<Item = &'static str> {
        CONFIG_KEYS.iter().copied().chain(std::iter::once("joint"))
    }

    /// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", n + 1), format!("expected key=value, got `{line}`"))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn to_kv_text(&self) -> String {
        TrainConfig::keys()
            .map(|k| format!("{k}={}\n", self.get(k).unwrap()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("lr", self.lr),
            ("clip_k", self.clip_k),
            ("eps", self.eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(k, format!("must be positive and finite, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::config("rho", "must lie in [0, 1)"));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope.is_finite()) {
            return Err(Error::config("leaky_slope", "must be non-negative"));
        }
        for (k, v) in [
            ("n_outer", self.n_outer),
            ("d_steps", self.d_steps),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(k, "must be at least 1"));
            }
        }
        if self.inner_cap == Some(0) {
            return Err(Error::config("inner_cap", "must be at least 1"));
        }
        self.dims(1, 1).validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.alpha, c.beta, c.lambda), (0.5, 2.0, 2.0));
        assert_eq!((c.lr, c.clip_k, c.d_steps, c.batch_size), (5e-5, 0.01, 5, 64));
        assert_eq!((c.d_c, c.d_z), (1024, 100));
        c.validate().unwrap();
    }

    #[test]
    fn kv_round_trip() {
        let mut c = TrainConfig {
            inner_cap: Some(4),
            divergence: DivergenceMode::JsMonteCarlo { samples: 8 },
            ablation: "no_reg+no_triplet".parse().unwrap(),
            wrong_class_mode: WrongClassMode::Kmeans,
            joint: true,
            lr: 1.5e-3,
            ..Default::default()
        };
        c.seed = u64::MAX;
        let mut back = TrainConfig::default();
        back.apply_kv_text(&c.to_kv_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn parse_errors_name_the_key() {
        let mut c = TrainConfig::default();
        let e = c.apply_kv_text("# comment\nalpha = 0.25 # trailing\n\nbogus=1").unwrap_err();
        assert!(matches!(&e, Error::ConfigInvalid { key, .. } if key == "bogus"), "{e}");
        assert_eq!(c.alpha, 0.25);
        let e = c.set("lr", "fast").unwrap_err();
        assert!(e.to_string().contains("`lr`"));
        assert!(c.set("ablation", "no_magic").is_err());
        assert!(c.apply_kv_text("noequals").is_err());
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn validation() {
        let c = TrainConfig { alpha: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { n_outer: 0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { inner_cap: Some(0), ..Default::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { d_c: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn inner_steps_follow_cap() {
        let c = TrainConfig::default();
        assert_eq!((1..=4).map(|i| c.inner_steps(i)).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        let c = TrainConfig { inner_cap: Some(2), ..Default::default() };
        assert_eq!((1..=4).map(|i| c.inner_steps(i)).collect::<Vec<_>>(), vec![1, 2, 2, 2]);
    }

    #[test]
    fn ablation_text() {
        assert_eq!(Ablation::default().to_string(), "none");
        let a: Ablation = "no_gan, no_reg".parse().unwrap();
        assert!(a.no_gan && a.no_reg && !a.no_triplet);
        assert_eq!(a.to_string(), "no_reg+no_gan");
        assert_eq!(a.to_string().parse::<Ablation>().unwrap(), a);
    }
}
