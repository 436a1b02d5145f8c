//! Run configuration (TOML) and ablation variants.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use irtrack_core::fitting::FitConfig;
use irtrack_core::metrics::{DEFAULT_RADIUS, DEFAULT_THRESHOLDS};
use irtrack_core::prior::{Generator, PriorConfig};
use irtrack_core::renderer::RenderSettings;
use irtrack_core::synth::ScenarioConfig;
use irtrack_core::tracker::TrackerConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFormat {
    #[default]
    Ppm,
    Png,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Ppm => "ppm",
            ImageFormat::Png => "png",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Center-distance match radius, meters.
    pub radius: f64,
    /// Recall targets of the AMOTA sweep.
    pub thresholds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { radius: DEFAULT_RADIUS, thresholds: DEFAULT_THRESHOLDS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Full,
    NoEmbed,
    NoRgb,
    NoPerceptual,
    NoSchedule,
    NoLatentAffinity,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Full, Variant::NoEmbed, Variant::NoRgb, Variant::NoPerceptual, Variant::NoSchedule, Variant::NoLatentAffinity];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEmbed => "no-L_embed",
            Variant::NoRgb => "no-L_RGB",
            Variant::NoPerceptual => "no-L_perceptual",
            Variant::NoSchedule => "no-schedule",
            Variant::NoLatentAffinity => "w_z=0",
        }
    }

    /// Fitting and tracking settings of this variant derived from a base run.
    pub fn apply(self, fit: &FitConfig, tracker: &TrackerConfig) -> (FitConfig, TrackerConfig) {
        let (mut f, mut t) = (*fit, tracker.clone());
        match self {
            Variant::Full => {}
            Variant::NoEmbed => f.use_embed = false,
            Variant::NoRgb => f.use_rgb = false,
            Variant::NoPerceptual => f.use_perceptual = false,
            Variant::NoSchedule => f.schedule = false,
            Variant::NoLatentAffinity => t.affinity.w_z = 0.0,
        }
        (f, t)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            format!("unknown variant `{s}`, expected one of {}", names.join(", "))
        })
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub variants: Vec<Variant>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { variants: Variant::ALL.to_vec() }
    }
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; scene `i` uses `seed + i`.
    pub seed: u64,
    /// Root of the scene directories, relative to the config file.
    pub output: PathBuf,
    #[serde(default = "one")]
    pub n_scenes: usize,
    #[serde(default)]
    pub image_format: ImageFormat,
    /// Refine detections by inverse rendering before association.
    #[serde(default = "yes")]
    pub refine: bool,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub render: RenderSettings,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub tracker: TrackerConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablate: AblateConfig,
}

impl RunConfig {
    /// Parses and validates a config file. Relative outputs resolve against
    /// the file's directory; `seed` replaces the configured master seed.
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if cfg.output.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.output = base.join(&cfg.output);
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e: toml::de::Error| e.to_string().trim_end().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: irtrack_core::Error| CliError::Config(format!("[{name}] {e}"));
        if self.n_scenes == 0 {
            return Err(CliError::Config("n_scenes must be positive".into()));
        }
        self.scenario.validate().map_err(|e| field("scenario", e))?;
        self.render.validate().map_err(|e| field("render", e))?;
        self.fit.validate().map_err(|e| field("fit", e))?;
        self.tracker.validate().map_err(|e| field("tracker", e))?;
        Generator::new(self.prior).map_err(|e| field("prior", e))?;
        if !(self.eval.radius > 0.0) || self.eval.thresholds == 0 {
            return Err(CliError::Config("[eval] radius and thresholds must be positive".into()));
        }
        if self.ablate.variants.is_empty() {
            return Err(CliError::Config("[ablate] variants must not be empty".into()));
        }
        Ok(())
    }

    /// Scenario of scene `index`.
    pub fn scenario_for(&self, index: usize) -> ScenarioConfig {
        ScenarioConfig { seed: self.seed.wrapping_add(index as u64), ..self.scenario.clone() }
    }

    pub fn scene_dir(&self, index: usize) -> PathBuf {
        self.output.join(format!("scene_{index:03}"))
    }

    /// Short digest of everything except the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = RunConfig::parse("seed = 1\noutput = \"out\"\n").unwrap();
        assert_eq!(c.n_scenes, 1);
        assert_eq!(c.fit, FitConfig::default());
        assert_eq!(c.ablate.variants.len(), 6);
        c.validate().unwrap();
    }

    #[test]
    fn missing_field_is_named() {
        let e = RunConfig::parse("seed = 1\n").unwrap_err();
        assert!(e.contains("output"), "{e}");
    }

    #[test]
    fn unknown_field_is_reported_with_its_line() {
        let e = RunConfig::parse("seed = 1\noutput = \"o\"\n[fit]\nlamda = 3.0\n").unwrap_err();
        assert!(e.contains("lamda") && e.contains("line 4"), "{e}");
    }

    #[test]
    fn variants_round_trip_by_name() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Variant>().is_err());
        let c = RunConfig::parse("seed = 1\noutput = \"o\"\n[ablate]\nvariants = [\"w_z=0\", \"full\"]\n").unwrap();
        assert_eq!(c.ablate.variants, vec![Variant::NoLatentAffinity, Variant::Full]);
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = RunConfig::parse("seed = 1\noutput = \"a\"\n").unwrap();
        let b = RunConfig::parse("seed = 1\noutput = \"b\"\n").unwrap();
        let c = RunConfig::parse("seed = 2\noutput = \"a\"\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }
}
