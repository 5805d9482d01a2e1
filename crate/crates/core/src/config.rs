//! Run configuration: a line-oriented `key = value` file.
//!
//! Blank lines and `#` comments are ignored; unknown keys are errors. Every
//! key has a default, listed by [`RunConfig::default`]`.to_text()`. Relative
//! paths are resolved against the directory of the config file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{MonthRange, SplitSpec};
use crate::forest::JitterRanges;
use crate::gp::{HyperPrior, LogNormalPrior, OptimizerOptions};
use crate::synth::SynthConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    Ingest,
    FitTce,
    FitSce,
    FitTsce,
    Features,
    Select,
    Train,
    Forecast,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Synth,
        Stage::Ingest,
        Stage::FitTce,
        Stage::FitSce,
        Stage::FitTsce,
        Stage::Features,
        Stage::Select,
        Stage::Train,
        Stage::Forecast,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::FitTce => "fit-tce",
            Stage::FitSce => "fit-sce",
            Stage::FitTsce => "fit-tsce",
            Stage::Features => "features",
            Stage::Select => "select",
            Stage::Train => "train",
            Stage::Forecast => "forecast",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

/// How the confusion-map threshold is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ThresholdRule {
    /// Match the positive count of the last fit month on the first test month.
    Calibrate,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Event CSV; when unset the pipeline reads `<out>/synth/events.csv`.
    pub events: Option<PathBuf>,
    pub out: PathBuf,
    pub split: SplitSpec,
    /// Stages run by `pipeline`, in this order.
    pub stages: Vec<Stage>,
    pub seed: u64,
    /// Months extrapolated past the last fit month.
    pub horizon: usize,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub min_conflict_months: usize,
    pub window_months: usize,
    pub sce_subset_size: usize,
    pub tce_prior: HyperPrior,
    pub sce_prior: HyperPrior,
    pub tsce_prior: HyperPrior,
    pub optimizer: OptimizerOptions,
    pub selection_trees: usize,
    pub selection_max_depth: usize,
    pub selection_min_leaf: usize,
    pub selection_bootstrap_fraction: f64,
    pub ensemble_size: usize,
    pub jitter: JitterRanges,
    pub threshold: ThresholdRule,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            events: None,
            out: PathBuf::from("out"),
            split: SplitSpec::replication(),
            stages: Stage::ALL[1..].to_vec(),
            seed: 0,
            horizon: 36,
            jobs: 0,
            min_conflict_months: 8,
            window_months: 12,
            sce_subset_size: 60,
            tce_prior: HyperPrior::two_trend_default(),
            sce_prior: HyperPrior::spatial_default(),
            tsce_prior: HyperPrior::two_trend_default(),
            optimizer: OptimizerOptions::default(),
            selection_trees: 100,
            selection_max_depth: 8,
            selection_min_leaf: 10,
            selection_bootstrap_fraction: 0.8,
            ensemble_size: 1000,
            jitter: JitterRanges::default(),
            threshold: ThresholdRule::Calibrate,
            synth: SynthConfig::default(),
        }
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn pair<T: FromStr>(v: &str) -> std::result::Result<(T, T), String> {
    let (a, b) = v.split_once(',').ok_or_else(|| format!("expected `a, b`, got `{v}`"))?;
    Ok((num(a.trim())?, num(b.trim())?))
}

fn prior(v: &str) -> std::result::Result<LogNormalPrior, String> {
    let (median, sd): (f64, f64) = pair(v)?;
    if !(median > 0.0 && sd > 0.0 && median.is_finite() && sd.is_finite()) {
        return Err(format!("prior needs a positive median and log-sd, got `{v}`"));
    }
    Ok(LogNormalPrior::around(median, sd))
}

/// Mutable slot of a two-trend prior by name.
fn trend_prior_slot<'a>(p: &'a mut HyperPrior, name: &str) -> Option<&'a mut LogNormalPrior> {
    Some(match name {
        "long_lengthscale" => &mut p.components[0].0,
        "long_amplitude" => &mut p.components[0].1,
        "short_lengthscale" => &mut p.components[1].0,
        "short_amplitude" => &mut p.components[1].1,
        "noise" => &mut p.noise,
        _ => return None,
    })
}

fn spatial_prior_slot<'a>(p: &'a mut HyperPrior, name: &str) -> Option<&'a mut LogNormalPrior> {
    Some(match name {
        "lengthscale" => &mut p.components[0].0,
        "amplitude" => &mut p.components[0].1,
        "noise" => &mut p.noise,
        _ => return None,
    })
}

fn fmt_prior(p: &LogNormalPrior) -> String {
    // the median goes through exp(ln(x)); 12 significant digits hides the round-off
    let median: f64 = format!("{:.11e}", p.mode()).parse().expect("formatted float");
    format!("{median}, {}", p.log_sd)
}

impl RunConfig {
    /// Parses config text; relative paths are joined onto `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut c = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config { line: i + 1, message };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            c.set(k.trim(), v.trim(), base_dir).map_err(err)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str, base_dir: &Path) -> std::result::Result<(), String> {
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        match key {
            "events" => self.events = Some(path(v)),
            "out" => self.out = path(v),
            "split.train" => self.split.train = v.parse()?,
            "split.validation" => self.split.validation = v.parse()?,
            "split.test" => self.split.test = v.parse()?,
            "split.start_month" => self.split.start_month = Some(v.to_string()),
            "stages" => {
                self.stages = v
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<std::result::Result<_, _>>()?;
            }
            "seed" => self.seed = num(v)?,
            "horizon" => self.horizon = num(v)?,
            "jobs" => self.jobs = num(v)?,
            "tce.min_conflict_months" => self.min_conflict_months = num(v)?,
            "tce.window_months" => self.window_months = num(v)?,
            "sce.subset_size" => self.sce_subset_size = num(v)?,
            "optimizer.starts" => self.optimizer.starts = num(v)?,
            "optimizer.max_iterations" => self.optimizer.max_iterations = num(v)?,
            "optimizer.gradient_tolerance" => self.optimizer.gradient_tolerance = num(v)?,
            "optimizer.max_step" => self.optimizer.max_step = num(v)?,
            "optimizer.bound_sds" => self.optimizer.bound_sds = num(v)?,
            "selection.trees" => self.selection_trees = num(v)?,
            "selection.max_depth" => self.selection_max_depth = num(v)?,
            "selection.min_leaf" => self.selection_min_leaf = num(v)?,
            "selection.bootstrap_fraction" => self.selection_bootstrap_fraction = num(v)?,
            "ensemble.size" => self.ensemble_size = num(v)?,
            "ensemble.tree_count" => self.jitter.tree_count = pair(v)?,
            "ensemble.max_depth" => self.jitter.max_depth = pair(v)?,
            "ensemble.min_leaf" => self.jitter.min_leaf = pair(v)?,
            "ensemble.feature_subsample" => self.jitter.feature_subsample = pair(v)?,
            "ensemble.bootstrap_fraction" => self.jitter.bootstrap_fraction = pair(v)?,
            "evaluate.threshold" => {
                self.threshold = if v == "calibrate" {
                    ThresholdRule::Calibrate
                } else {
                    ThresholdRule::Fixed(num(v)?)
                }
            }
            _ => {
                if let Some(name) = key.strip_prefix("tce.prior.") {
                    *trend_prior_slot(&mut self.tce_prior, name).ok_or(format!("unknown key `{key}`"))? = prior(v)?;
                } else if let Some(name) = key.strip_prefix("tsce.prior.") {
                    *trend_prior_slot(&mut self.tsce_prior, name).ok_or(format!("unknown key `{key}`"))? = prior(v)?;
                } else if let Some(name) = key.strip_prefix("sce.prior.") {
                    *spatial_prior_slot(&mut self.sce_prior, name).ok_or(format!("unknown key `{key}`"))? = prior(v)?;
                } else if let Some(name) = key.strip_prefix("synth.") {
                    self.set_synth(name, v).map_err(|e| e.replace("{key}", key))?;
                } else {
                    return Err(format!("unknown key `{key}`"));
                }
            }
        }
        Ok(())
    }

    fn set_synth(&mut self, name: &str, v: &str) -> std::result::Result<(), String> {
        let s = &mut self.synth;
        match name {
            "rows" => s.rows = num(v)?,
            "cols" => s.cols = num(v)?,
            "months" => s.months = num(v)?,
            "cell_size" => s.cell_size = num(v)?,
            "origin" => s.origin = pair(v)?,
            "long_lengthscale" => s.long_lengthscale = num(v)?,
            "long_amplitude" => s.long_amplitude = num(v)?,
            "short_lengthscale" => s.short_lengthscale = num(v)?,
            "short_amplitude" => s.short_amplitude = num(v)?,
            "noise" => s.noise = num(v)?,
            "spatial_lengthscale" => s.spatial_lengthscale = num(v)?,
            "spatial_amplitude" => s.spatial_amplitude = num(v)?,
            "spatial_noise" => s.spatial_noise = num(v)?,
            "baseline" => s.baseline = num(v)?,
            "link_scale" => s.link_scale = num(v)?,
            "seed" => s.seed = num(v)?,
            _ => return Err("unknown key `{key}`".to_string()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config { line: 0, message: m });
        self.split.validate()?;
        if self.stages.is_empty() {
            return bad("no stages selected".into());
        }
        if self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return bad("stages must be listed once each, in pipeline order".into());
        }
        self.tce_prior.validate()?;
        self.tsce_prior.validate()?;
        self.sce_prior.validate()?;
        self.jitter.validate()?;
        if self.optimizer.starts == 0 || self.optimizer.max_iterations == 0 {
            return bad("optimizer needs at least one start and one iteration".into());
        }
        if self.window_months == 0 || self.min_conflict_months > self.window_months {
            return bad("tce.min_conflict_months must not exceed tce.window_months".into());
        }
        if self.sce_subset_size == 0 {
            return bad("sce.subset_size must be at least 1".into());
        }
        if self.selection_trees == 0 || self.selection_max_depth == 0 || self.selection_min_leaf == 0 {
            return bad("selection forest settings must be positive".into());
        }
        if !(self.selection_bootstrap_fraction > 0.0 && self.selection_bootstrap_fraction <= 1.0) {
            return bad("selection.bootstrap_fraction must lie in (0, 1]".into());
        }
        if self.ensemble_size == 0 {
            return bad("ensemble.size must be at least 1".into());
        }
        if let ThresholdRule::Fixed(t) = self.threshold {
            if !t.is_finite() {
                return bad("evaluate.threshold must be finite".into());
            }
        }
        Ok(())
    }

    /// Every key with its current value; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if let Some(e) = &self.events {
            kv("events", e.display().to_string());
        }
        kv("out", self.out.display().to_string());
        kv("split.train", self.split.train.to_string());
        kv("split.validation", self.split.validation.to_string());
        kv("split.test", self.split.test.to_string());
        if let Some(m) = &self.split.start_month {
            kv("split.start_month", m.clone());
        }
        kv(
            "stages",
            self.stages.iter().map(|s| s.name()).collect::<Vec<_>>().join(", "),
        );
        kv("seed", self.seed.to_string());
        kv("horizon", self.horizon.to_string());
        kv("jobs", self.jobs.to_string());
        kv("tce.min_conflict_months", self.min_conflict_months.to_string());
        kv("tce.window_months", self.window_months.to_string());
        for (prefix, p) in [("tce", &self.tce_prior), ("tsce", &self.tsce_prior)] {
            kv(
                &format!("{prefix}.prior.long_lengthscale"),
                fmt_prior(&p.components[0].0),
            );
            kv(&format!("{prefix}.prior.long_amplitude"), fmt_prior(&p.components[0].1));
            kv(
                &format!("{prefix}.prior.short_lengthscale"),
                fmt_prior(&p.components[1].0),
            );
            kv(
                &format!("{prefix}.prior.short_amplitude"),
                fmt_prior(&p.components[1].1),
            );
            kv(&format!("{prefix}.prior.noise"), fmt_prior(&p.noise));
        }
        kv("sce.subset_size", self.sce_subset_size.to_string());
        kv("sce.prior.lengthscale", fmt_prior(&self.sce_prior.components[0].0));
        kv("sce.prior.amplitude", fmt_prior(&self.sce_prior.components[0].1));
        kv("sce.prior.noise", fmt_prior(&self.sce_prior.noise));
        let o = &self.optimizer;
        kv("optimizer.starts", o.starts.to_string());
        kv("optimizer.max_iterations", o.max_iterations.to_string());
        kv("optimizer.gradient_tolerance", o.gradient_tolerance.to_string());
        kv("optimizer.max_step", o.max_step.to_string());
        kv("optimizer.bound_sds", o.bound_sds.to_string());
        kv("selection.trees", self.selection_trees.to_string());
        kv("selection.max_depth", self.selection_max_depth.to_string());
        kv("selection.min_leaf", self.selection_min_leaf.to_string());
        kv(
            "selection.bootstrap_fraction",
            self.selection_bootstrap_fraction.to_string(),
        );
        kv("ensemble.size", self.ensemble_size.to_string());
        let j = &self.jitter;
        kv("ensemble.tree_count", format!("{}, {}", j.tree_count.0, j.tree_count.1));
        kv("ensemble.max_depth", format!("{}, {}", j.max_depth.0, j.max_depth.1));
        kv("ensemble.min_leaf", format!("{}, {}", j.min_leaf.0, j.min_leaf.1));
        kv(
            "ensemble.feature_subsample",
            format!("{}, {}", j.feature_subsample.0, j.feature_subsample.1),
        );
        kv(
            "ensemble.bootstrap_fraction",
            format!("{}, {}", j.bootstrap_fraction.0, j.bootstrap_fraction.1),
        );
        kv(
            "evaluate.threshold",
            match self.threshold {
                ThresholdRule::Calibrate => "calibrate".into(),
                ThresholdRule::Fixed(t) => t.to_string(),
            },
        );
        let y = &self.synth;
        kv("synth.rows", y.rows.to_string());
        kv("synth.cols", y.cols.to_string());
        kv("synth.months", y.months.to_string());
        kv("synth.cell_size", y.cell_size.to_string());
        kv("synth.origin", format!("{}, {}", y.origin.0, y.origin.1));
        kv("synth.long_lengthscale", y.long_lengthscale.to_string());
        kv("synth.long_amplitude", y.long_amplitude.to_string());
        kv("synth.short_lengthscale", y.short_lengthscale.to_string());
        kv("synth.short_amplitude", y.short_amplitude.to_string());
        kv("synth.noise", y.noise.to_string());
        kv("synth.spatial_lengthscale", y.spatial_lengthscale.to_string());
        kv("synth.spatial_amplitude", y.spatial_amplitude.to_string());
        kv("synth.spatial_noise", y.spatial_noise.to_string());
        kv("synth.baseline", y.baseline.to_string());
        kv("synth.link_scale", y.link_scale.to_string());
        kv("synth.seed", y.seed.to_string());
        s
    }

    /// Months covered by the final forecast: the test range, cut at the horizon.
    pub fn forecast_months(&self) -> MonthRange {
        let fit_end = self.split.fit_range().end;
        MonthRange {
            start: self.split.test.start,
            end: self.split.test.end.min(fit_end + self.horizon as i64),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = RunConfig::default();
        let back = RunConfig::parse(&c.to_text(), Path::new("")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn assignments_and_comments() {
        let text = "# run\nseed = 7\n\nensemble.size = 20  # small\ntce.prior.short_lengthscale = 4, 0.5\nevaluate.threshold = 0.06\nstages = synth, ingest\nevents = data/e.csv\n";
        let c = RunConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.ensemble_size, 20);
        assert!((c.tce_prior.components[1].0.mode() - 4.0).abs() < 1e-12);
        assert_eq!(c.threshold, ThresholdRule::Fixed(0.06));
        assert_eq!(c.stages, vec![Stage::Synth, Stage::Ingest]);
        assert_eq!(c.events.as_deref(), Some(Path::new("/base/data/e.csv")));
    }

    #[test]
    fn errors_carry_line_numbers() {
        match RunConfig::parse("seed = 1\nbogus = 2\n", Path::new("")) {
            Err(Error::Config { line: 2, message }) => assert!(message.contains("bogus")),
            other => panic!("{other:?}"),
        }
        match RunConfig::parse("\n\nhorizon = soon\n", Path::new("")) {
            Err(Error::Config { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            RunConfig::parse("synth.colour = red\n", Path::new("")),
            Err(Error::Config { line: 1, .. })
        ));
        assert!(RunConfig::parse("no equals sign\n", Path::new("")).is_err());
        assert!(RunConfig::parse("ensemble.tree_count = 9, 3\n", Path::new("")).is_err());
    }

    #[test]
    fn forecast_months_follow_the_horizon() {
        let mut c = RunConfig::default();
        assert_eq!(c.forecast_months(), MonthRange { start: 336, end: 371 });
        c.horizon = 6;
        assert_eq!(c.forecast_months(), MonthRange { start: 336, end: 341 });
    }
}
