//! Run configurations. Every report embeds the config that produced it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::DEFAULT_D_M;
use crate::analysis::Prop2Regime;
use crate::attack::{AttackConfig, Objective, SweepAxis};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::numcore::Precision;
use crate::robustness::{FareConfig, Pooling, TaskSpec};
use crate::toolkit::synth::SynthSpec;

/// Where encoder and alignment weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    /// A `VEWTS` bundle; when absent, weights are drawn from `seed`.
    pub weights: Option<PathBuf>,
    pub seed: u64,
    pub spectral_cap: f64,
    pub d_m: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            weights: None,
            seed: 0,
            spectral_cap: 1.0,
            d_m: DEFAULT_D_M,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum ImageSource {
    Synthetic {
        count: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        spec: SynthSpec,
    },
    /// `VETEN` image files.
    Files(Vec<PathBuf>),
}

impl Default for ImageSource {
    fn default() -> Self {
        ImageSource::Synthetic {
            count: 32,
            seed: 0,
            spec: SynthSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenWeightsParams {
    pub model: ModelSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackParams {
    pub model: ModelSpec,
    pub images: ImageSource,
    pub attack: AttackConfig,
    /// Also write 8-bit PPM previews of the adversarial images.
    pub ppm: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Proposition {
    /// Aligned-feature lower bound.
    One,
    /// Class-token propagation bound.
    Two,
}

impl Serialize for Proposition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(match self {
            Proposition::One => 1,
            Proposition::Two => 2,
        })
    }
}

impl<'de> Deserialize<'de> for Proposition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Str(String),
        }
        let s = match Raw::deserialize(d)? {
            Raw::Num(n) => n.to_string(),
            Raw::Str(s) => s,
        };
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl std::str::FromStr for Proposition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1" => Ok(Proposition::One),
            "2" => Ok(Proposition::Two),
            other => Err(Error::invalid(format!("unknown proposition `{other}`; expected 1 or 2"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyParams {
    pub prop: Proposition,
    pub trials: usize,
    pub seed: u64,
    /// Sizes for the aligned-feature trials.
    pub n_v: usize,
    pub d_v: usize,
    pub d_m: usize,
    /// Encoder for the propagation trials; forced to one layer and one head.
    pub encoder: EncoderConfig,
    pub spectral_cap: f64,
    pub regime: Prop2Regime,
}

impl Default for VerifyParams {
    fn default() -> Self {
        Self {
            prop: Proposition::One,
            trials: 1000,
            seed: 0,
            n_v: 4,
            d_v: 8,
            d_m: 12,
            encoder: EncoderConfig {
                layers: 1,
                ..EncoderConfig::default()
            },
            spectral_cap: 1.0,
            regime: Prop2Regime::Uniform,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AblateMode {
    /// Class token only, both, patch tokens only.
    #[default]
    Targets,
    /// Euclidean, KL, cosine on patch tokens.
    Losses,
}

impl AblateMode {
    pub fn objectives(self) -> [Objective; 3] {
        match self {
            AblateMode::Targets => [Objective::CosCls, Objective::CosPatchPlusCls, Objective::CosPatch],
            AblateMode::Losses => [Objective::EuclidPatch, Objective::KlPatch, Objective::CosPatch],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateParams {
    pub mode: AblateMode,
    pub model: ModelSpec,
    pub task: TaskSpec,
    pub attack: AttackConfig,
    pub pooling: Pooling,
}

impl Default for AblateParams {
    fn default() -> Self {
        Self {
            mode: AblateMode::Targets,
            model: ModelSpec::default(),
            task: TaskSpec::default(),
            attack: AttackConfig::default(),
            pooling: Pooling::TokenMean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepParams {
    pub model: ModelSpec,
    pub images: ImageSource,
    pub attack: AttackConfig,
    pub axis: SweepAxis,
    /// With an ε axis, also tabulate feature-difference trends for these
    /// objectives.
    pub trend_objectives: Vec<Objective>,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            images: ImageSource::default(),
            attack: AttackConfig::default(),
            axis: SweepAxis::Steps(vec![10, 50, 100]),
            trend_objectives: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneParams {
    pub model: ModelSpec,
    /// Unlabeled training images; defaults to the task's train split.
    pub images: Option<ImageSource>,
    pub task: TaskSpec,
    pub fare: FareConfig,
    /// Fresh attack used to compare the encoders before and after.
    pub attack: AttackConfig,
    pub pooling: Pooling,
}

impl Default for FinetuneParams {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            images: None,
            task: TaskSpec::default(),
            fare: FareConfig::default(),
            attack: AttackConfig::default(),
            pooling: Pooling::TokenMean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedModel {
    pub name: String,
    #[serde(default)]
    pub model: ModelSpec,
    /// Finetune this model before use.
    #[serde(default)]
    pub finetune: Option<FareConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MobiusSpec {
    pub robust: String,
    pub standard: String,
    /// Allowed shortfall before the asymmetry counts as absent.
    #[serde(default)]
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferParams {
    pub models: Vec<NamedModel>,
    pub task: TaskSpec,
    pub attack: AttackConfig,
    pub pooling: Pooling,
    pub mobius: Option<MobiusSpec>,
}

impl Default for TransferParams {
    fn default() -> Self {
        Self {
            models: vec![
                NamedModel {
                    name: "standard".into(),
                    model: ModelSpec::default(),
                    finetune: None,
                },
                NamedModel {
                    name: "robust".into(),
                    model: ModelSpec::default(),
                    finetune: Some(FareConfig::default()),
                },
            ],
            task: TaskSpec::default(),
            attack: AttackConfig {
                epsilon: 8.0 / 255.0,
                ..AttackConfig::default()
            },
            pooling: Pooling::TokenMean,
            mobius: Some(MobiusSpec {
                robust: "robust".into(),
                standard: "standard".into(),
                margin: 0.0,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskEvalParams {
    pub model: ModelSpec,
    pub task: TaskSpec,
    pub attack: AttackConfig,
    pub pooling: Pooling,
}

impl Default for TaskEvalParams {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            task: TaskSpec::default(),
            attack: AttackConfig::default(),
            pooling: Pooling::TokenMean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    GenWeights(GenWeightsParams),
    Attack(AttackParams),
    Verify(VerifyParams),
    Ablate(AblateParams),
    Sweep(SweepParams),
    Transfer(TransferParams),
    Finetune(FinetuneParams),
    TaskEval(TaskEvalParams),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenWeights(_) => "gen-weights",
            Command::Attack(_) => "attack",
            Command::Verify(_) => "verify",
            Command::Ablate(_) => "ablate",
            Command::Sweep(_) => "sweep",
            Command::Transfer(_) => "transfer",
            Command::Finetune(_) => "finetune",
            Command::TaskEval(_) => "task-eval",
        }
    }
}

/// Global settings plus one subcommand's parameters, flattened into one JSON
/// object tagged by `command`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    #[serde(flatten)]
    pub command: Command,
}

impl<'de> Deserialize<'de> for RunConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let mut map = serde_json::Map::deserialize(d)?;
        let out_dir = map.remove("out_dir").ok_or_else(|| D::Error::missing_field("out_dir"))?;
        let out_dir = serde_json::from_value(out_dir).map_err(D::Error::custom)?;
        let precision = match map.remove("precision") {
            Some(p) => serde_json::from_value(p).map_err(D::Error::custom)?,
            None => Precision::F64,
        };
        let command = serde_json::from_value(serde_json::Value::Object(map)).map_err(D::Error::custom)?;
        Ok(Self {
            out_dir,
            precision,
            command,
        })
    }
}

impl RunConfig {
    pub fn new(out_dir: impl Into<PathBuf>, command: Command) -> Self {
        Self {
            out_dir: out_dir.into(),
            precision: Precision::F64,
            command,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_roundtrip() {
        let c = RunConfig::new(
            "out",
            Command::Sweep(SweepParams {
                axis: SweepAxis::Epsilon(vec![2.0 / 255.0, 4.0 / 255.0]),
                ..Default::default()
            }),
        );
        let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_json(r#"{"out_dir": "o", "command": "verify", "trails": 3}"#).unwrap_err();
        assert!(err.to_string().contains("trails"), "{err}");
        let err = RunConfig::from_json(
            r#"{"out_dir": "o", "command": "gen-weights", "model": {"encoder": {"layerz": 2}}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("layerz"), "{err}");
    }

    #[test]
    fn budgets_accept_ratios() {
        let c = RunConfig::from_json(
            r#"{"out_dir": "o", "command": "attack",
                "attack": {"epsilon": "4/255", "alpha": "1/255", "steps": 3, "objective": "cos-patch"}}"#,
        )
        .unwrap();
        let Command::Attack(a) = c.command else { panic!() };
        assert_eq!(a.attack.epsilon, 4.0 / 255.0);
        assert_eq!(a.attack.alpha, 1.0 / 255.0);
    }

    #[test]
    fn proposition_parses() {
        assert_eq!("2".parse::<Proposition>().unwrap(), Proposition::Two);
        let c = RunConfig::from_json(r#"{"out_dir": "o", "command": "verify", "prop": 2}"#).unwrap();
        assert!(matches!(c.command, Command::Verify(VerifyParams { prop: Proposition::Two, .. })));
        assert!("3".parse::<Proposition>().is_err());
    }
}
