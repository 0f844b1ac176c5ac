//! JSON harness configuration. Every key is optional (defaults shown by
//! `tig --config default ...` echoing the config into its report); unknown
//! keys are rejected.

use serde::{Deserialize, Serialize};

use crate::depth::{BinMode, DepthBins, InnerDepthOptions, LossReduction, ReferenceStrategy};
use crate::distill::{DistillOptions, GramNormalization, GramOptions};
use crate::error::{Error, Result};
use crate::scenegen::SceneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinsConfig {
    pub mode: BinMode,
    pub count: usize,
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for BinsConfig {
    fn default() -> Self {
        Self {
            mode: BinMode::Uniform,
            count: 112,
            d_min: 1.0,
            d_max: 60.0,
        }
    }
}

impl BinsConfig {
    pub fn build(&self) -> Result<DepthBins> {
        let bins = match self.mode {
            BinMode::Uniform => DepthBins::uniform(self.count, self.d_min, self.d_max),
            BinMode::SpacingIncreasing => DepthBins::spacing_increasing(self.count, self.d_min, self.d_max),
            BinMode::Explicit => Err(Error::Config("bins.mode must be uniform or spacing_increasing".into())),
        };
        bins.map_err(|e| Error::Config(format!("bins: {e}")))
    }
}

/// Composition weights of the four differentiated terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub absolute: f64,
    pub relative: f64,
    pub inter_channel: f64,
    pub inter_keypoint: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            absolute: 1.0,
            relative: 1.0,
            inter_channel: 1.0,
            inter_keypoint: 1.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.absolute, self.relative, self.inter_channel, self.inter_keypoint]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Heavy-ball momentum on the raw gradient.
    Momentum,
    /// Momentum on the gradient with per-coordinate second-moment scaling.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    /// Seeded small Gaussian noise.
    Noise,
    /// Teacher BEV map and depth logits whose expected depth matches ground truth.
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Step size of the depth logits.
    pub step_size: f64,
    /// Step size of the student BEV map.
    pub bev_step_size: f64,
    pub momentum: f64,
    /// Second-moment decay (Adam only).
    pub beta2: f64,
    /// Step size decays linearly to `final_step_fraction * step_size` at `max_steps`.
    pub final_step_fraction: f64,
    pub max_steps: usize,
    /// Stop once total loss <= (1 - target_reduction) * initial.
    pub target_reduction: f64,
    /// Stop once total loss <= this absolute value.
    pub abs_tolerance: f64,
    pub init: StudentInit,
    pub init_noise: f64,
    /// Abort when total loss exceeds this multiple of the initial loss.
    pub divergence_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            step_size: 0.05,
            bev_step_size: 0.2,
            momentum: 0.9,
            beta2: 0.999,
            final_step_fraction: 0.05,
            max_steps: 2000,
            target_reduction: 0.99,
            abs_tolerance: 1e-12,
            init: StudentInit::Noise,
            init_noise: 0.01,
            divergence_factor: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub step: f64,
    /// Exit status is nonzero when any checked term exceeds this.
    pub tolerance: f64,
    pub seed: u64,
    /// Instances whose reference choice is within this score gap of a tie
    /// are excluded and tagged.
    pub tie_margin: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            step: 1e-6,
            tolerance: 1e-4,
            seed: 7,
            tie_margin: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub scene: SceneConfig,
    pub bins: BinsConfig,
    pub reference: ReferenceStrategy,
    pub signed_reference_error: bool,
    pub loss_reduction: LossReduction,
    pub keypoint_grid: usize,
    pub enlarge: f64,
    pub gram_normalization: GramNormalization,
    pub weights: LossWeights,
    /// Detection loss supplied from outside; added to the total as a constant.
    pub external_det_loss: Option<f64>,
    pub optimizer: OptimizerConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            bins: BinsConfig::default(),
            reference: ReferenceStrategy::AllToAdaptiveSmallestError,
            signed_reference_error: false,
            loss_reduction: LossReduction::Mean,
            keypoint_grid: 6,
            enlarge: 1.25,
            gram_normalization: GramNormalization::None,
            weights: LossWeights::default(),
            external_det_loss: None,
            optimizer: OptimizerConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl HarnessConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `"default"` selects the built-in configuration; anything else is a path.
    pub fn load(spec: &str) -> Result<Self> {
        if spec == "default" {
            return Ok(Self::default());
        }
        let text =
            std::fs::read_to_string(spec).map_err(|e| Error::Config(format!("cannot read config {spec:?}: {e}")))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.bins.build()?;
        self.weights.validate()?;
        let o = &self.optimizer;
        let checks = [
            (
                o.step_size > 0.0 && o.step_size.is_finite(),
                "optimizer.step_size must be > 0",
            ),
            (
                o.bev_step_size > 0.0 && o.bev_step_size.is_finite(),
                "optimizer.bev_step_size must be > 0",
            ),
            ((0.0..1.0).contains(&o.momentum), "optimizer.momentum must be in [0, 1)"),
            ((0.0..1.0).contains(&o.beta2), "optimizer.beta2 must be in [0, 1)"),
            (
                (0.0..=1.0).contains(&o.final_step_fraction),
                "optimizer.final_step_fraction must be in [0, 1]",
            ),
            (o.max_steps >= 1, "optimizer.max_steps must be >= 1"),
            (
                o.target_reduction > 0.0 && o.target_reduction <= 1.0,
                "optimizer.target_reduction must be in (0, 1]",
            ),
            (o.abs_tolerance >= 0.0, "optimizer.abs_tolerance must be >= 0"),
            (o.init_noise >= 0.0, "optimizer.init_noise must be >= 0"),
            (o.divergence_factor > 1.0, "optimizer.divergence_factor must be > 1"),
            (self.keypoint_grid >= 2, "keypoint_grid must be >= 2"),
            (self.enlarge >= 1.0, "enlarge must be >= 1"),
            (self.gradcheck.instances >= 1, "gradcheck.instances must be >= 1"),
            (self.gradcheck.step > 0.0, "gradcheck.step must be > 0"),
            (self.gradcheck.tolerance > 0.0, "gradcheck.tolerance must be > 0"),
            (
                self.external_det_loss.is_none_or(f64::is_finite),
                "external_det_loss must be finite",
            ),
        ];
        if let Some((_, msg)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(Error::Config((*msg).into()));
        }
        Ok(())
    }

    pub fn depth_bins(&self) -> Result<DepthBins> {
        self.bins.build()
    }

    pub fn inner_depth_options(&self) -> InnerDepthOptions {
        InnerDepthOptions {
            strategy: self.reference,
            reduction: self.loss_reduction,
            signed_reference_error: self.signed_reference_error,
        }
    }

    pub fn distill_options(&self) -> DistillOptions {
        DistillOptions {
            g: self.keypoint_grid,
            enlarge: self.enlarge,
            gram: GramOptions {
                normalization: self.gram_normalization,
                reduction: self.loss_reduction,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let cfg = HarnessConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(HarnessConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(HarnessConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for text in [
            r#"{"wieghts": {}}"#,
            r#"{"weights": {"absolute": -1.0}}"#,
            r#"{"optimizer": {"momentum": 1.0}}"#,
            r#"{"optimizer": {"step_size": 0.0}}"#,
            r#"{"scene": {"channels": 0}}"#,
            r#"{"bins": {"count": 1}}"#,
            r#"{"reference": "closest"}"#,
            r#"{"keypoint_grid": 1}"#,
        ] {
            assert!(
                matches!(HarnessConfig::from_json(text), Err(Error::Config(_))),
                "{text}"
            );
        }
        let cfg = HarnessConfig::from_json(r#"{"reference": "one_to_one", "external_det_loss": 2.5}"#).unwrap();
        assert_eq!(cfg.reference, ReferenceStrategy::OneToOne);
        assert_eq!(cfg.external_det_loss, Some(2.5));
    }
}
