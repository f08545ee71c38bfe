//! Run configuration: defaults, `key=value` files and flag overrides.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use unode_core::model::{ArchConfig, BlockKind, OdeGradient};
use unode_core::ode::{Method, SolverConfig};
use unode_core::{Error, Result};

/// Base width of U-ResNet and U-Node at desk scale; U-Net keeps the 4x ratio
/// of the full-size presets.
pub const DESK_BASE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// 64x64 synthetic images, 60 epochs, narrow networks.
    Desk,
    /// Full widths and 600 epochs.
    Full,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "full" => Ok(Self::Full),
            _ => Err(Error::InvalidArgument(format!("unknown profile '{s}'"))),
        }
    }
}

impl Profile {
    fn name(self) -> &'static str {
        match self {
            Self::Desk => "desk",
            Self::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub profile: Profile,
    pub arch: String,
    pub base_width: usize,
    pub levels: usize,
    pub time_conditioning: bool,
    pub method: Method,
    /// Steps of the fixed-step methods.
    pub n_steps: usize,
    pub rtol: f64,
    pub atol: f64,
    pub ode_gradient: OdeGradient,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub augment: bool,
    pub tta: bool,
    pub erosion_radius: usize,
    pub size: usize,
    pub n_train: usize,
    pub n_tune: usize,
    pub n_test: usize,
    pub touching_fraction: f64,
    pub train_manifest: Option<PathBuf>,
    pub tune_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value '{v}' for '{key}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("bad value '{v}' for '{key}'"))),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Defaults for `profile` and `arch`.
    pub fn defaults(profile: Profile, arch: &str) -> Result<Self> {
        let preset = ArchConfig::named(arch)?;
        let full_base = preset.widths[0];
        let base_width = match (profile, preset.block_kind) {
            (Profile::Full, _) => full_base,
            (Profile::Desk, BlockKind::Plain) => 4 * DESK_BASE,
            (Profile::Desk, _) => DESK_BASE,
        };
        Ok(Self {
            command: String::new(),
            profile,
            arch: arch.to_string(),
            base_width,
            levels: preset.levels,
            time_conditioning: preset.time_conditioning,
            method: Method::Dopri5,
            n_steps: 1,
            rtol: 1e-3,
            atol: 1e-3,
            ode_gradient: OdeGradient::Adjoint,
            epochs: match profile {
                Profile::Desk => 60,
                Profile::Full => 600,
            },
            batch_size: 8,
            lr: if preset.block_kind == BlockKind::Plain { 1e-4 } else { 1e-3 },
            seed: 0,
            augment: true,
            tta: true,
            erosion_radius: 3,
            size: 64,
            n_train: 200,
            n_tune: 10,
            n_test: 50,
            touching_fraction: 0.3,
            train_manifest: None,
            tune_manifest: None,
            test_manifest: None,
            checkpoint: None,
            out_dir: PathBuf::from("run"),
        })
    }

    /// Resolve `pairs` (config-file entries first, then flags) over the
    /// defaults selected by the last `profile` and `arch` among them.
    pub fn resolve(command: &str, pairs: &[(String, String)]) -> Result<Self> {
        let last = |k: &str| pairs.iter().rev().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
        let profile = last("profile").map(Profile::from_str).transpose()?.unwrap_or(Profile::Desk);
        let arch = last("arch").unwrap_or("unode");
        let mut cfg = Self::defaults(profile, arch)?;
        cfg.command = command.to_string();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "command" => self.command = v.to_string(),
            "profile" => self.profile = v.parse()?,
            "arch" => {
                ArchConfig::named(v)?;
                self.arch = v.to_string();
            }
            "base_width" => self.base_width = parse(key, v)?,
            "levels" => self.levels = parse(key, v)?,
            "time_conditioning" => self.time_conditioning = parse_bool(key, v)?,
            "method" => self.method = v.parse()?,
            "n_steps" => self.n_steps = parse(key, v)?,
            "tol" => {
                self.rtol = parse(key, v)?;
                self.atol = self.rtol;
            }
            "rtol" => self.rtol = parse(key, v)?,
            "atol" => self.atol = parse(key, v)?,
            "ode_gradient" => self.ode_gradient = v.parse()?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "tta" => self.tta = parse_bool(key, v)?,
            "erosion_radius" => self.erosion_radius = parse(key, v)?,
            "size" => self.size = parse(key, v)?,
            "n_train" => self.n_train = parse(key, v)?,
            "n_tune" => self.n_tune = parse(key, v)?,
            "n_test" => self.n_test = parse(key, v)?,
            "touching_fraction" => self.touching_fraction = parse(key, v)?,
            "train_manifest" => self.train_manifest = opt_path(v),
            "tune_manifest" => self.tune_manifest = opt_path(v),
            "test_manifest" => self.test_manifest = opt_path(v),
            "checkpoint" => self.checkpoint = opt_path(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::InvalidArgument(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a finite non-negative number");
        }
        if !(0.0..=1.0).contains(&self.touching_fraction) {
            return bad("touching_fraction must lie in [0, 1]");
        }
        self.arch_config()?;
        Ok(())
    }

    pub fn solver(&self) -> SolverConfig {
        let mut s = if self.method == Method::Dopri5 {
            SolverConfig::dopri5(self.rtol)
        } else {
            SolverConfig::fixed(self.method, self.n_steps)
        };
        s.rtol = self.rtol;
        s.atol = self.atol;
        s
    }

    pub fn arch_config(&self) -> Result<ArchConfig> {
        let mut a = ArchConfig::named(&self.arch)?
            .with_base(self.base_width)
            .with_levels(self.levels);
        if a.block_kind == BlockKind::Ode {
            a = a.with_solver(self.solver());
            a.ode_gradient = self.ode_gradient;
        }
        a.time_conditioning = self.time_conditioning;
        a.validate()?;
        Ok(a)
    }

    /// One `key=value` line per field.
    pub fn to_text(&self) -> String {
        let p = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").expect("string write");
        kv("command", self.command.clone());
        kv("profile", self.profile.name().into());
        kv("arch", self.arch.clone());
        kv("base_width", self.base_width.to_string());
        kv("levels", self.levels.to_string());
        kv("time_conditioning", self.time_conditioning.to_string());
        kv("method", self.method.to_string());
        kv("n_steps", self.n_steps.to_string());
        kv("rtol", self.rtol.to_string());
        kv("atol", self.atol.to_string());
        kv("ode_gradient", self.ode_gradient.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("seed", self.seed.to_string());
        kv("augment", self.augment.to_string());
        kv("tta", self.tta.to_string());
        kv("erosion_radius", self.erosion_radius.to_string());
        kv("size", self.size.to_string());
        kv("n_train", self.n_train.to_string());
        kv("n_tune", self.n_tune.to_string());
        kv("n_test", self.n_test.to_string());
        kv("touching_fraction", self.touching_fraction.to_string());
        kv("train_manifest", p(&self.train_manifest));
        kv("tune_manifest", p(&self.tune_manifest));
        kv("test_manifest", p(&self.test_manifest));
        kv("checkpoint", p(&self.checkpoint));
        kv("out_dir", self.out_dir.display().to_string());
        s
    }
}

/// Parse `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected key=value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unet_lr_default() {
        let pairs = vec![("arch".to_string(), "unet".to_string())];
        assert_eq!(RunConfig::resolve("train", &pairs).unwrap().lr, 1e-4);
        let pairs = vec![
            ("lr".to_string(), "0.01".to_string()),
            ("arch".to_string(), "unet".to_string()),
        ];
        assert_eq!(RunConfig::resolve("train", &pairs).unwrap().lr, 0.01);
        assert_eq!(RunConfig::resolve("train", &[]).unwrap().lr, 1e-3);
    }

    #[test]
    fn text_roundtrip() {
        let mut cfg = RunConfig::resolve("eval", &[]).unwrap();
        cfg.checkpoint = Some("a/b.ckpt".into());
        cfg.rtol = 1e-5;
        let back = RunConfig::resolve("eval", &parse_pairs(&cfg.to_text()).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn flags_override_file() {
        let mut pairs = parse_pairs("epochs=3\n# c\nseed = 9\n").unwrap();
        pairs.push(("epochs".into(), "5".into()));
        let cfg = RunConfig::resolve("train", &pairs).unwrap();
        assert_eq!((cfg.epochs, cfg.seed), (5, 9));
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(RunConfig::resolve("train", &[("nope".into(), "1".into())]).is_err());
        assert!(RunConfig::resolve("train", &[("epochs".into(), "x".into())]).is_err());
        assert!(parse_pairs("novalue").is_err());
    }
}
