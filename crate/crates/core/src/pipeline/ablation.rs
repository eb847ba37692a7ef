//! Ablation suites on desk-scale synthetic data.
//!
//! Stage one trains ScaffNet on one scene layout; stage two trains FusionNet
//! on another and every comparison is scored on a held-out split of that
//! second layout. Trained models are cached in [`AblationContext`] so suites
//! that share a variant train it once.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{evaluate_model, fusion_config_for, train_fusionnet, train_scaffnet, FusionOptions, Model, RunControl, TrainOptions};
use crate::checkpoint::Checkpoint;
use crate::dataset::{generate_cached, Dataset, GenerateSpec};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::MetricSet;
use crate::nets::{OutputHead, Preset, ScaffNetConfig};
use crate::sampling::SamplingStrategy;
use crate::scenegen::Layout;
use crate::seed::derive_seed;
use crate::spp::SppConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationSuite {
    SppOnOff,
    DensitySweep,
    OutputHead,
}

impl AblationSuite {
    pub const ALL: [AblationSuite; 3] = [Self::SppOnOff, Self::DensitySweep, Self::OutputHead];

    pub fn name(self) -> &'static str {
        match self {
            Self::SppOnOff => "spp-on-off",
            Self::DensitySweep => "density-sweep",
            Self::OutputHead => "output-head",
        }
    }
}

impl FromStr for AblationSuite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            Error::InvalidInput(format!("unknown ablation suite `{s}` (expected spp-on-off, density-sweep or output-head)"))
        })
    }
}

/// One generated split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub layout: Layout,
    pub sequences: usize,
    pub frames: usize,
}

impl SplitSpec {
    pub fn new(layout: Layout, sequences: usize, frames: usize) -> Self {
        Self { layout, sequences, frames }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub seed: u64,
    #[serde(default = "default_preset")]
    pub preset: Preset,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    /// Sparse sampling used for training; its point count is set from the
    /// first entry of `densities`.
    pub sampling: SamplingStrategy,
    /// Fractions of pixels; the first is the training density.
    pub densities: Vec<f64>,
    pub scaffnet_train: SplitSpec,
    pub scaffnet_val: SplitSpec,
    pub fusionnet_train: SplitSpec,
    pub test: SplitSpec,
    pub scaffnet: TrainOptions,
    pub fusionnet: TrainOptions,
    #[serde(default)]
    pub fusion: FusionOptions,
    /// Required relative MAE gain of SPP over no SPP.
    #[serde(default = "default_spp_margin")]
    pub spp_margin: f64,
}

fn default_preset() -> Preset {
    Preset::Tiny
}
fn default_width() -> usize {
    160
}
fn default_height() -> usize {
    128
}
fn default_spp_margin() -> f64 {
    0.05
}

impl AblationConfig {
    /// Desk-scale defaults: indoor rooms for stage one, corridors for stage
    /// two, Harris corners at 0.5%, 0.15% and 0.05% density.
    pub fn desk_scale(seed: u64) -> Self {
        let mut scaffnet = TrainOptions::new(seed, 2, 8, 1e-3);
        scaffnet.crop = Some((64, 96));
        scaffnet.flip = true;
        let fusionnet = TrainOptions::new(seed, 2, 4, 2e-4);
        Self {
            seed,
            preset: Preset::Tiny,
            width: 160,
            height: 128,
            sampling: SamplingStrategy::corners(102),
            densities: vec![0.005, 0.0015, 0.0005],
            scaffnet_train: SplitSpec::new(Layout::Room, 50, 20),
            scaffnet_val: SplitSpec::new(Layout::Room, 5, 20),
            fusionnet_train: SplitSpec::new(Layout::Corridor, 10, 20),
            test: SplitSpec::new(Layout::Corridor, 4, 10),
            scaffnet,
            fusionnet,
            fusion: FusionOptions {
                weights: LossWeights::corner(),
                ..FusionOptions::default()
            },
            spp_margin: default_spp_margin(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.densities.is_empty() || self.densities.iter().any(|d| !(*d > 0.0 && *d <= 1.0)) {
            return Err(Error::InvalidInput("densities must be non-empty fractions in (0, 1]".into()));
        }
        for s in [&self.scaffnet_train, &self.scaffnet_val, &self.fusionnet_train, &self.test] {
            if s.sequences == 0 || s.frames < 3 {
                return Err(Error::InvalidInput("every split needs a sequence of at least 3 frames".into()));
            }
        }
        self.scaffnet.validate()?;
        self.fusionnet.validate()
    }

    fn base_sampling(&self) -> SamplingStrategy {
        self.sampling
            .with_points(SamplingStrategy::points_for_density(self.densities[0], self.width, self.height))
    }

    fn generate(&self, split: &SplitSpec, purpose: &str) -> Result<Dataset> {
        let mut spec = GenerateSpec::new(
            derive_seed(self.seed, purpose, 0),
            split.layout,
            split.sequences,
            split.frames,
            self.base_sampling(),
        );
        spec.width = self.width;
        spec.height = self.height;
        generate_cached(&spec)
    }
}

/// A model scored on one split at one density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub density: f64,
    pub metrics: MetricSet,
    /// Wall-clock training time of the variant in seconds.
    pub train_seconds: f64,
}

/// An expected ordering and whether it held.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl TrendCheck {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub suite: AblationSuite,
    pub rows: Vec<AblationRow>,
    pub checks: Vec<TrendCheck>,
}

impl AblationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn row(&self, variant: &str, density: f64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.density == density)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("## Ablation: {}\n\n", self.suite.name());
        s.push_str("| variant | density | MAE (mm) | RMSE (mm) | iMAE (1/km) | iRMSE (1/km) | train (s) |\n");
        s.push_str("|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "| {} | {:.2}% | {:.1} | {:.1} | {:.2} | {:.2} | {:.0} |",
                r.variant,
                r.density * 100.0,
                m.mae,
                m.rmse,
                m.imae,
                m.irmse,
                r.train_seconds
            );
        }
        s.push_str("\n| check | verdict | detail |\n|---|---|---|\n");
        for c in &self.checks {
            let _ = writeln!(s, "| {} | {} | {} |", c.name, if c.passed { "pass" } else { "fail" }, c.detail);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,density,mae_mm,rmse_mm,imae_1km,irmse_1km,pixels,train_seconds\n");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.variant, r.density, m.mae, m.rmse, m.imae, m.irmse, m.count, r.train_seconds
            );
        }
        s
    }
}

#[derive(Clone, Debug)]
struct Trained {
    checkpoint: Checkpoint,
    seconds: f64,
}

/// Datasets and trained variants shared across suites.
pub struct AblationContext {
    pub config: AblationConfig,
    scaffnet_train: Option<Dataset>,
    scaffnet_val: Option<Dataset>,
    fusionnet_train: Option<Dataset>,
    test: Option<Dataset>,
    scaffnets: Vec<(bool, Trained)>,
    fusionnets: Vec<(OutputHead, Trained)>,
}

macro_rules! lazy_split {
    ($name:ident, $purpose:literal) => {
        pub fn $name(&mut self) -> Result<&Dataset> {
            if self.$name.is_none() {
                self.$name = Some(self.config.generate(&self.config.$name.clone(), $purpose)?);
            }
            Ok(self.$name.as_ref().expect("just generated"))
        }
    };
}

impl AblationContext {
    pub fn new(config: AblationConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            scaffnet_train: None,
            scaffnet_val: None,
            fusionnet_train: None,
            test: None,
            scaffnets: Vec::new(),
            fusionnets: Vec::new(),
        })
    }

    lazy_split!(scaffnet_train, "ablation-scaffnet-train");
    lazy_split!(scaffnet_val, "ablation-scaffnet-val");
    lazy_split!(fusionnet_train, "ablation-fusionnet-train");
    lazy_split!(test, "ablation-test");

    fn scaffnet_config(&self, spp: bool) -> ScaffNetConfig {
        ScaffNetConfig::preset(self.config.preset, spp.then(SppConfig::corner))
    }

    fn train_scaff(&mut self, spp: bool) -> Result<Trained> {
        if let Some((_, t)) = self.scaffnets.iter().find(|(s, _)| *s == spp) {
            return Ok(t.clone());
        }
        self.scaffnet_train()?;
        self.scaffnet_val()?;
        let (train, val) = (self.scaffnet_train.as_ref().unwrap(), self.scaffnet_val.as_ref().unwrap());
        let start = Instant::now();
        let ctl = RunControl {
            validation: Some(val),
            ..RunControl::default()
        };
        let result = train_scaffnet(train, self.scaffnet_config(spp), &self.config.scaffnet, &ctl)?;
        let t = Trained {
            checkpoint: result.checkpoint,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("trained ScaffNet (spp {spp}) in {:.0} s", t.seconds);
        self.scaffnets.push((spp, t.clone()));
        Ok(t)
    }

    fn train_fusion(&mut self, head: OutputHead) -> Result<Trained> {
        if let Some((_, t)) = self.fusionnets.iter().find(|(h, _)| *h == head) {
            return Ok(t.clone());
        }
        let scaff = self.train_scaff(true)?;
        self.fusionnet_train()?;
        self.test()?;
        let train = self.fusionnet_train.as_ref().unwrap();
        let config = fusion_config_for(self.config.preset, train, head);
        let start = Instant::now();
        let result = train_fusionnet(
            train,
            &scaff.checkpoint,
            config,
            &self.config.fusionnet,
            &self.config.fusion,
            &RunControl {
                validation: self.test.as_ref(),
                ..RunControl::default()
            },
        )?;
        let t = Trained {
            checkpoint: result.checkpoint,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("trained FusionNet ({head:?}) in {:.0} s", t.seconds);
        self.fusionnets.push((head, t.clone()));
        Ok(t)
    }

    pub fn scaffnet_checkpoint(&mut self, spp: bool) -> Result<Checkpoint> {
        Ok(self.train_scaff(spp)?.checkpoint)
    }

    pub fn fusionnet_checkpoint(&mut self, head: OutputHead) -> Result<Checkpoint> {
        Ok(self.train_fusion(head)?.checkpoint)
    }

    fn score(&self, variant: &str, trained: &Trained, data: &Dataset, density: f64) -> Result<AblationRow> {
        let model = Model::from_checkpoint(&trained.checkpoint)?;
        Ok(AblationRow {
            variant: variant.to_string(),
            density,
            metrics: evaluate_model(&model, data, None)?.aggregate,
            train_seconds: trained.seconds,
        })
    }

    /// The test split redrawn at `density`.
    fn test_at(&mut self, density: f64) -> Result<Dataset> {
        let c = &self.config;
        let strategy = c.sampling.with_points(SamplingStrategy::points_for_density(density, c.width, c.height));
        let seed = derive_seed(c.seed, "ablation-density", 0);
        self.test()?.resample(&strategy, seed)
    }

    pub fn run(&mut self, suite: AblationSuite) -> Result<AblationReport> {
        let base = self.config.densities[0];
        let mut rows = Vec::new();
        let mut checks = Vec::new();
        match suite {
            AblationSuite::SppOnOff => {
                for (spp, name) in [(true, "scaffnet+spp"), (false, "scaffnet-no-spp")] {
                    let t = self.train_scaff(spp)?;
                    self.scaffnet_val()?;
                    rows.push(self.score(name, &t, self.scaffnet_val.as_ref().unwrap(), base)?);
                }
                let (with, without) = (rows[0].metrics.mae, rows[1].metrics.mae);
                let margin = (without - with) / without;
                checks.push(TrendCheck::new(
                    "spp-lower-mae",
                    with < without && margin >= self.config.spp_margin,
                    format!(
                        "MAE {with:.1} vs {without:.1} mm, relative margin {:.1}% (required {:.1}%)",
                        margin * 100.0,
                        self.config.spp_margin * 100.0
                    ),
                ));
            }
            AblationSuite::DensitySweep => {
                let scaff = self.train_scaff(true)?;
                let fusion = self.train_fusion(OutputHead::ScaleResidual)?;
                let densities = self.config.densities.clone();
                for &d in &densities {
                    let data = self.test_at(d)?;
                    rows.push(self.score("scaffnet", &scaff, &data, d)?);
                    rows.push(self.score("fusionnet", &fusion, &data, d)?);
                }
                checks.extend(density_checks(&rows));
            }
            AblationSuite::OutputHead => {
                let scaff = self.train_scaff(true)?;
                let scale = self.train_fusion(OutputHead::ScaleResidual)?;
                let direct = self.train_fusion(OutputHead::Direct)?;
                self.test()?;
                let test = self.test.as_ref().unwrap();
                rows.push(self.score("scaffnet (input)", &scaff, test, base)?);
                rows.push(self.score("fusionnet alpha*d0+beta", &scale, test, base)?);
                rows.push(self.score("fusionnet direct", &direct, test, base)?);
                let (s, a, d) = (rows[0].metrics.mae, rows[1].metrics.mae, rows[2].metrics.mae);
                checks.push(TrendCheck::new(
                    "fusionnet-refines-scaffnet",
                    a < s,
                    format!("MAE {a:.1} vs ScaffNet {s:.1} mm"),
                ));
                checks.push(TrendCheck::new(
                    "scale-residual-head-not-worse",
                    a <= d,
                    format!("MAE {a:.1} vs direct {d:.1} mm"),
                ));
            }
        }
        Ok(AblationReport { suite, rows, checks })
    }
}

/// Expected orderings of a density sweep: for each model MAE rises strictly
/// as density falls, and ScaffNet loses relatively more than FusionNet
/// between the densest and sparsest inputs.
pub fn density_checks(rows: &[AblationRow]) -> Vec<TrendCheck> {
    let mut checks = Vec::new();
    let mut degradation = Vec::new();
    for name in ["scaffnet", "fusionnet"] {
        let mut order: Vec<(f64, f64)> =
            rows.iter().filter(|r| r.variant == name).map(|r| (r.density, r.metrics.mae)).collect();
        if order.len() < 2 {
            continue;
        }
        order.sort_by(|a, b| b.0.total_cmp(&a.0));
        let increasing = order.windows(2).all(|w| w[1].1 > w[0].1);
        let (first, last) = (order[0].1, order[order.len() - 1].1);
        degradation.push((last - first) / first);
        let listed: Vec<String> = order.iter().map(|(d, m)| format!("{:.2}%: {m:.1}", d * 100.0)).collect();
        checks.push(TrendCheck::new(
            &format!("{name}-mae-rises-as-density-falls"),
            increasing,
            format!("MAE (mm) {}", listed.join(", ")),
        ));
    }
    if let [scaff, fusion] = degradation[..] {
        checks.push(TrendCheck::new(
            "scaffnet-degrades-faster",
            scaff > fusion,
            format!(
                "relative MAE increase: ScaffNet {:.1}%, FusionNet {:.1}%",
                scaff * 100.0,
                fusion * 100.0
            ),
        ));
    }
    checks
}

/// Run one suite from scratch.
pub fn run_ablation(suite: AblationSuite, config: AblationConfig) -> Result<AblationReport> {
    AblationContext::new(config)?.run(suite)
}
