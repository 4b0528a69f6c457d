//! Run configuration: flat dotted `section.key = value` text that maps
//! losslessly onto [`TrainConfig`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::criterion::{CostWeights, LossWeights};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::foundation::FoundationConfig;
use crate::pipeline::dataset::DatasetFormat;
use crate::pseudolabel::PseudoLabelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    /// Epochs at whose start the rate is divided by `lr_drop_factor`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            seed: 0,
            epochs: 500,
            lr: 1e-3,
            lr_drop_epochs: vec![400],
            lr_drop_factor: 5.0,
            batch_size: 8,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    /// Full-scale schedule: 70 epochs, lr 1e-4 divided by 5 at 50 and 60.
    pub fn full_scale() -> Self {
        OptimConfig { epochs: 70, lr: 1e-4, lr_drop_epochs: vec![50, 60], lr_drop_factor: 5.0, batch_size: 16, ..OptimConfig::default() }
    }

    /// Piecewise-constant learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr / self.lr_drop_factor.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub format: DatasetFormat,
    /// Annotation file for hico/vcoco; relative paths resolve against the
    /// config file's directory.
    pub annotations: String,
    pub synth_seed: u64,
    pub synth_images: usize,
    pub eval_synth_seed: u64,
    pub eval_synth_images: usize,
    /// Evaluation annotation file for hico/vcoco.
    pub eval_annotations: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            format: DatasetFormat::Synth,
            annotations: String::new(),
            synth_seed: 0,
            synth_images: 32,
            eval_synth_seed: 1000,
            eval_synth_images: 32,
            eval_annotations: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub lambda: f64,
    pub top_k: usize,
    pub score_floor: f64,
    pub recall_threshold: f64,
    pub known_object: bool,
    /// Object ids held out by the unseen-object split.
    pub unseen_objects: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { lambda: 0.5, top_k: 100, score_floor: 0.0, recall_threshold: 0.1, known_object: false, unseen_objects: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "runs/desk".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub train: OptimConfig,
    pub data: DataConfig,
    pub foundation: FoundationConfig,
    pub decoder: DecoderConfig,
    pub pseudo: PseudoLabelConfig,
    pub cost: CostWeights,
    pub loss: LossWeights,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// One `section.key = value` line per leaf, in sorted key order.
    /// Integers must fit in i64.
    pub fn to_flat_string(&self) -> Result<String> {
        let v = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = String::new();
        flatten("", &v, &mut out);
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let t = &self.train;
        if !(t.lr > 0.0) || !(t.lr_drop_factor > 0.0) || !(t.weight_decay >= 0.0) || !(t.eps > 0.0) {
            return bad("train.lr, train.lr_drop_factor and train.eps must be positive, train.weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)");
        }
        if t.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if t.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("train.lr_drop_epochs must be strictly increasing");
        }
        if !(0.0..=1.0).contains(&self.eval.lambda) {
            return bad("eval.lambda must lie in [0, 1]");
        }
        if self.pseudo.gamma < 0.0 || self.pseudo.beta_b < 0.0 || self.pseudo.beta_u < 0.0 {
            return bad("pseudo weights must be non-negative");
        }
        if self.loss.num_points == 0 {
            return bad("loss.num_points must be positive");
        }
        if self.loss.use_inter && !self.decoder.intersection_mask {
            return bad("loss.use_inter needs decoder.intersection_mask");
        }
        if self.foundation.dim != self.decoder.dim {
            return bad("foundation.dim must equal decoder.dim");
        }
        if self.foundation.top_k == 0 {
            return bad("foundation.top_k must be positive");
        }
        if self.data.format != DatasetFormat::Synth && self.data.annotations.is_empty() {
            return bad("data.annotations is required for hico/vcoco");
        }
        if self.data.format == DatasetFormat::Synth && self.data.synth_images == 0 {
            return bad("data.synth_images must be positive");
        }
        self.decoder.validate()
    }

    pub fn output_dir(&self, base: &Path) -> PathBuf {
        base.join(&self.output.dir)
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut String) {
    match v {
        toml::Value::Table(t) => {
            for (k, x) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        leaf => {
            out.push_str(&format!("{prefix} = {leaf}\n"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_round_trips() {
        let c = TrainConfig::default();
        let text = c.to_flat_string().unwrap();
        assert!(text.lines().all(|l| !l.starts_with('[')));
        assert!(text.contains("train.lr = 0.001\n"), "{text}");
        assert_eq!(TrainConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn partial_files_use_defaults() {
        let c = TrainConfig::parse("train.epochs = 3\ndecoder.layers = 2\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.decoder.layers, 2);
        assert_eq!(c.loss, LossWeights::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(TrainConfig::parse("train.learning_rate = 1.0").is_err());
        assert!(TrainConfig::parse("train.lr = -1.0").is_err());
        assert!(TrainConfig::parse("train.lr_drop_epochs = [5, 3]").is_err());
        assert!(TrainConfig::parse("data.format = \"hico\"").is_err());
        assert!(TrainConfig::parse("decoder.dim = 16").is_err());
        assert!(TrainConfig::parse("decoder.dim = 16\nfoundation.dim = 16").is_ok());
    }

    #[test]
    fn full_scale_schedule() {
        let p = OptimConfig::full_scale();
        assert_eq!((p.epochs, p.lr, p.lr_drop_epochs.clone(), p.lr_drop_factor), (70, 1e-4, vec![50, 60], 5.0));
        assert_eq!(p.lr_at(0), 1e-4);
        assert_eq!(p.lr_at(49), 1e-4);
        assert_eq!(p.lr_at(50), 1e-4 / 5.0);
        assert_eq!(p.lr_at(69), 1e-4 / 25.0);
    }

    proptest! {
        #[test]
        fn arbitrary_values_round_trip(lr in 1e-9f64..10.0, wd in 0.0f64..1.0, epochs in 0usize..1000, seed in 0..=i64::MAX as u64,
                                      drops in proptest::collection::btree_set(0usize..500, 0..4), gamma in 0.0f64..1.0, union in any::<bool>()) {
            let mut c = TrainConfig::default();
            c.train.lr = lr;
            c.train.weight_decay = wd;
            c.train.epochs = epochs;
            c.train.seed = seed;
            c.train.lr_drop_epochs = drops.into_iter().collect();
            c.pseudo.gamma = gamma;
            c.loss.use_union = union;
            c.decoder.seed = seed;
            prop_assert_eq!(TrainConfig::parse(&c.to_flat_string().unwrap()).unwrap(), c);
        }

        #[test]
        fn schedule_is_piecewise_constant(drops in proptest::collection::btree_set(1usize..100, 0..4), factor in 1.5f64..10.0) {
            let c = OptimConfig { lr_drop_epochs: drops.iter().copied().collect(), lr_drop_factor: factor, ..OptimConfig::default() };
            for e in 1..120usize {
                let changed = c.lr_at(e) != c.lr_at(e - 1);
                prop_assert_eq!(changed, drops.contains(&e));
            }
        }
    }
}
