//! Flat `section.key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Later command-line
//! flags override file values through [`KeyValues::set`].

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::pipeline::{AblationConfig, SimulationConfig, SplitRatios};
use crate::score_distill::DistillConfig;
use crate::spectral::MaskParams;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
    path: Option<PathBuf>,
}

impl KeyValues {
    pub fn parse(text: &str, path: Option<&Path>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("line {}: expected `section.key = value`", n + 1)))?;
            let key = key.trim();
            let well_formed = key
                .split_once('.')
                .is_some_and(|(s, k)| !s.is_empty() && !k.is_empty() && !k.contains('.'));
            if !well_formed || key.contains(char::is_whitespace) {
                return Err(Error::format(path, format!("line {}: bad key {key:?}", n + 1)));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::format(path, format!("line {}: duplicate key {key:?}", n + 1)));
            }
        }
        Ok(Self {
            entries,
            path: path.map(Path::to_path_buf),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?, Some(path))
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::format(self.path.as_deref(), format!("{key} = {v:?}: {e}")))
            })
            .transpose()
    }

    fn read_into<T>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Rejects keys outside `known`, catching typos.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::format(self.path.as_deref(), format!("unknown key {k:?}"))),
            None => Ok(()),
        }
    }
}

pub const SIMULATION_KEYS: &[&str] = &[
    "sim.n_frames",
    "sim.sr_factor",
    "sim.patch",
    "sim.seed",
    "sim.cfa",
    "sim.bit_depth",
    "sim.trajectory",
    "tremor.magnitude",
    "tremor.smoothness",
    "tremor.rotation_sigma_deg",
    "tremor.scale_sigma",
    "tremor.perspective_sigma",
    "noise.shot_gain",
    "noise.read_sigma",
    "noise.model",
];

pub const FUSION_KEYS: &[&str] = &[
    "fusion.sr_factor",
    "fusion.kernel_sigma",
    "fusion.min_weight",
    "fusion.oracle_alignment",
    "fusion.refine_passes",
    "align.model",
    "align.levels",
    "align.max_iters",
    "align.tol",
    "align.border",
];

pub const MASK_KEYS: &[&str] = &["mask.alpha", "mask.beta", "mask.gamma", "mask.radius", "mask.threshold"];

pub const DISTILL_KEYS: &[&str] = &[
    "distill.lambda",
    "distill.t_min",
    "distill.t_max",
    "distill.steps",
    "distill.lr",
    "distill.mode",
    "distill.omega",
    "distill.seed",
    "schedule.steps",
    "schedule.beta_start",
    "schedule.beta_end",
];

pub const ABLATION_KEYS: &[&str] = &["ablation.prior_shift", "ablation.prior_high_variance", "ablation.epsilon"];

pub const DATASET_KEYS: &[&str] = &["dataset.train", "dataset.val", "dataset.test", "dataset.seed"];

/// Every key understood by some command.
pub fn all_keys() -> Vec<&'static str> {
    [SIMULATION_KEYS, FUSION_KEYS, MASK_KEYS, DISTILL_KEYS, ABLATION_KEYS, DATASET_KEYS].concat()
}

pub fn simulation_config(kv: &KeyValues) -> Result<SimulationConfig> {
    let mut c = SimulationConfig::default();
    kv.read_into("sim.n_frames", &mut c.n_frames)?;
    kv.read_into("sim.sr_factor", &mut c.sr_factor)?;
    kv.read_into("sim.patch", &mut c.patch)?;
    kv.read_into("sim.seed", &mut c.seed)?;
    kv.read_into("sim.cfa", &mut c.cfa)?;
    kv.read_into("sim.bit_depth", &mut c.bit_depth)?;
    c.trajectory_path = kv.get::<PathBuf>("sim.trajectory")?;
    kv.read_into("tremor.magnitude", &mut c.tremor.magnitude)?;
    kv.read_into("tremor.smoothness", &mut c.tremor.smoothness)?;
    kv.read_into("tremor.rotation_sigma_deg", &mut c.tremor.rotation_sigma_deg)?;
    kv.read_into("tremor.scale_sigma", &mut c.tremor.scale_sigma)?;
    kv.read_into("tremor.perspective_sigma", &mut c.tremor.perspective_sigma)?;
    kv.read_into("noise.shot_gain", &mut c.noise.shot_gain)?;
    kv.read_into("noise.read_sigma", &mut c.noise.read_sigma)?;
    kv.read_into("noise.model", &mut c.noise.model)?;
    Ok(c)
}

pub fn fusion_config(kv: &KeyValues) -> Result<FusionConfig> {
    let mut c = FusionConfig::default();
    kv.read_into("fusion.sr_factor", &mut c.sr_factor)?;
    kv.read_into("fusion.kernel_sigma", &mut c.kernel_sigma)?;
    kv.read_into("fusion.min_weight", &mut c.min_weight)?;
    kv.read_into("fusion.oracle_alignment", &mut c.use_given_trajectory)?;
    kv.read_into("fusion.refine_passes", &mut c.refine_passes)?;
    kv.read_into("align.model", &mut c.align.model)?;
    kv.read_into("align.levels", &mut c.align.levels)?;
    kv.read_into("align.max_iters", &mut c.align.max_iters)?;
    kv.read_into("align.tol", &mut c.align.tol)?;
    kv.read_into("align.border", &mut c.align.border)?;
    Ok(c)
}

pub fn mask_params(kv: &KeyValues) -> Result<MaskParams> {
    let mut m = MaskParams::default();
    kv.read_into("mask.alpha", &mut m.alpha)?;
    kv.read_into("mask.beta", &mut m.beta)?;
    kv.read_into("mask.gamma", &mut m.gamma)?;
    kv.read_into("mask.radius", &mut m.radius)?;
    Ok(m)
}

pub fn distill_config(kv: &KeyValues) -> Result<DistillConfig> {
    let mut c = DistillConfig {
        mask: mask_params(kv)?,
        ..DistillConfig::default()
    };
    c.mask_threshold = kv.get("mask.threshold")?;
    kv.read_into("distill.lambda", &mut c.lambda)?;
    kv.read_into("distill.t_min", &mut c.t_min)?;
    kv.read_into("distill.t_max", &mut c.t_max)?;
    kv.read_into("distill.steps", &mut c.steps)?;
    kv.read_into("distill.lr", &mut c.lr)?;
    kv.read_into("distill.mode", &mut c.mode)?;
    kv.read_into("distill.omega", &mut c.omega)?;
    kv.read_into("distill.seed", &mut c.seed)?;
    kv.read_into("schedule.steps", &mut c.schedule.steps)?;
    kv.read_into("schedule.beta_start", &mut c.schedule.beta_start)?;
    kv.read_into("schedule.beta_end", &mut c.schedule.beta_end)?;
    Ok(c)
}

pub fn ablation_config(kv: &KeyValues) -> Result<AblationConfig> {
    let mut c = AblationConfig::default();
    kv.read_into("ablation.prior_shift", &mut c.prior_shift)?;
    kv.read_into("ablation.prior_high_variance", &mut c.prior_high_variance)?;
    kv.read_into("ablation.epsilon", &mut c.epsilon)?;
    c.fusion = FusionConfig {
        use_given_trajectory: true,
        ..fusion_config(kv)?
    };
    if let Some(oracle) = kv.get("fusion.oracle_alignment")? {
        c.fusion.use_given_trajectory = oracle;
    }
    Ok(c)
}

pub fn split_ratios(kv: &KeyValues) -> Result<SplitRatios> {
    let mut r = SplitRatios::default();
    kv.read_into("dataset.train", &mut r.train)?;
    kv.read_into("dataset.val", &mut r.val)?;
    kv.read_into("dataset.test", &mut r.test)?;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raw_sensor::CfaPattern;
    use crate::score_distill::{DistillMode, OmegaRule};

    #[test]
    fn parses_and_overrides() {
        let text = "# burst\nsim.n_frames = 7\n\nsim.cfa = BGGR\ndistill.mode = naive\ndistill.omega = snr\n";
        let mut kv = KeyValues::parse(text, None).unwrap();
        kv.set("sim.n_frames", 3);
        let s = simulation_config(&kv).unwrap();
        assert_eq!(s.n_frames, 3);
        assert_eq!(s.cfa, CfaPattern::Bggr);
        assert_eq!(s.sr_factor, 4);
        let d = distill_config(&kv).unwrap();
        assert_eq!(d.mode, DistillMode::NaiveVsd);
        assert_eq!(d.omega, OmegaRule::SnrNormalized);
        kv.check_known(&all_keys()).unwrap();
    }

    #[test]
    fn malformed_lines_are_format_errors() {
        for bad in ["n_frames = 3", "sim.n_frames 3", "a.b.c = 1", "sim. = 2", "sim.x = 1\nsim.x = 2"] {
            assert!(matches!(KeyValues::parse(bad, None), Err(Error::Format { .. })), "{bad}");
        }
        let kv = KeyValues::parse("sim.n_frames = many", None).unwrap();
        assert!(matches!(simulation_config(&kv), Err(Error::Format { .. })));
        let kv = KeyValues::parse("sim.frames = 2", None).unwrap();
        assert!(kv.check_known(&all_keys()).is_err());
    }

    #[test]
    fn ablation_defaults_to_oracle_alignment() {
        let kv = KeyValues::default();
        assert!(ablation_config(&kv).unwrap().fusion.use_given_trajectory);
        let kv = KeyValues::parse("fusion.oracle_alignment = false", None).unwrap();
        assert!(!ablation_config(&kv).unwrap().fusion.use_given_trajectory);
        assert!(!fusion_config(&KeyValues::default()).unwrap().use_given_trajectory);
    }
}
