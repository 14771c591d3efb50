//! Retraining learning-rate schedules.
//!
//! Four retraining schedules are derived from an original training schedule:
//!
//! - `ft`  — constant at the original's final (smallest) rate;
//! - `lrw` — replay of the original's last `t` epochs;
//! - `slr` — cosine warmup to the original peak, then 10× drops at 50% and
//!   75% of the post-warmup epochs;
//! - `clr` — 1-cycle: per-step cosine warmup to the peak, then cosine
//!   anneal to a small floor.
//!
//! Epoch-constant kinds (step/ft/lrw/slr) are stored as a per-epoch table;
//! the API is per-step for every kind.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Step,
    Ft,
    Lrw,
    Slr,
    Clr,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScheduleKind::Step => "step",
            ScheduleKind::Ft => "ft",
            ScheduleKind::Lrw => "lrw",
            ScheduleKind::Slr => "slr",
            ScheduleKind::Clr => "clr",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(ScheduleKind::Step),
            "ft" => Ok(ScheduleKind::Ft),
            "lrw" => Ok(ScheduleKind::Lrw),
            "slr" => Ok(ScheduleKind::Slr),
            "clr" => Ok(ScheduleKind::Clr),
            other => Err(Error::Config(format!("unknown schedule kind '{other}'"))),
        }
    }
}

/// Piecewise-constant learning-rate profile used for original training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Cifar,
    Imagenet,
}

impl Profile {
    pub fn total_epochs(self) -> usize {
        match self {
            Profile::Cifar => 160,
            Profile::Imagenet => 90,
        }
    }

    /// (start_epoch, lr) segments.
    pub fn segments(self) -> &'static [(usize, f64)] {
        match self {
            Profile::Cifar => &[(0, 0.1), (80, 0.01), (120, 0.001)],
            Profile::Imagenet => &[(0, 0.1), (30, 0.01), (60, 0.001)],
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar" => Ok(Profile::Cifar),
            "imagenet" => Ok(Profile::Imagenet),
            other => Err(Error::Config(format!("unknown profile '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Table {
    /// One value per epoch, repeated for every step of that epoch.
    PerEpoch(Vec<f64>),
    /// 1-cycle evaluated per step.
    Clr {
        alpha_init: f64,
        alpha_max: f64,
        alpha_min: f64,
        warmup_steps: usize,
        total_steps: usize,
    },
}

/// A total function from global training step to learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub budget_epochs: usize,
    pub steps_per_epoch: usize,
    /// Human-readable description of the schedule this one derives from.
    pub source: String,
    table: Table,
}

impl Schedule {
    pub fn total_steps(&self) -> usize {
        self.budget_epochs * self.steps_per_epoch
    }

    /// Learning rate at a global step in [0, total_steps).
    pub fn lr_at(&self, step: usize) -> f64 {
        assert!(
            step < self.total_steps(),
            "step {step} outside budget of {} steps",
            self.total_steps()
        );
        match &self.table {
            Table::PerEpoch(lrs) => lrs[step / self.steps_per_epoch],
            Table::Clr {
                alpha_init,
                alpha_max,
                alpha_min,
                warmup_steps,
                total_steps,
            } => clr_lr(step, *alpha_init, *alpha_max, *alpha_min, *warmup_steps, *total_steps),
        }
    }

    /// Learning rate at the first step of an epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr_at(epoch * self.steps_per_epoch)
    }

    /// Largest rate anywhere in the schedule.
    pub fn max_lr(&self) -> f64 {
        match &self.table {
            Table::PerEpoch(lrs) => lrs.iter().cloned().fold(f64::MIN, f64::max),
            Table::Clr { alpha_max, .. } => *alpha_max,
        }
    }

    /// Rate at the final step.
    pub fn final_lr(&self) -> f64 {
        self.lr_at(self.total_steps() - 1)
    }

    fn per_epoch_lrs(&self) -> Vec<f64> {
        (0..self.budget_epochs).map(|e| self.lr_at_epoch(e)).collect()
    }

    /// All (epoch, step, lr) rows, one per step.
    pub fn emit(&self) -> Vec<(usize, usize, f64)> {
        (0..self.total_steps())
            .map(|s| (s / self.steps_per_epoch, s, self.lr_at(s)))
            .collect()
    }

    /// Write the emission as CSV with header `epoch,step,lr`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,step,lr")?;
        for (epoch, step, lr) in self.emit() {
            writeln!(w, "{epoch},{step},{lr}")?;
        }
        Ok(())
    }
}

fn clr_lr(
    step: usize,
    alpha_init: f64,
    alpha_max: f64,
    alpha_min: f64,
    warmup_steps: usize,
    total_steps: usize,
) -> f64 {
    if step < warmup_steps {
        if step == 0 {
            return alpha_init;
        }
        let p = step as f64 / warmup_steps as f64;
        alpha_init + (alpha_max - alpha_init) * (1.0 - (PI * p).cos()) / 2.0
    } else {
        let anneal = total_steps - warmup_steps;
        if step == warmup_steps {
            return alpha_max; // warmup end hits the peak exactly
        }
        if step + 1 == total_steps {
            return alpha_min; // final step hits the floor exactly
        }
        let p = (step - warmup_steps) as f64 / (anneal - 1) as f64;
        alpha_min + (alpha_max - alpha_min) * (1.0 + (PI * p).cos()) / 2.0
    }
}

fn check_steps_per_epoch(steps_per_epoch: usize) -> Result<()> {
    if steps_per_epoch == 0 {
        return Err(Error::Config("steps_per_epoch must be >= 1".into()));
    }
    Ok(())
}

/// The original training schedule of a profile (160 epochs for CIFAR,
/// 90 for ImageNet).
pub fn build_original(profile: Profile, steps_per_epoch: usize) -> Result<Schedule> {
    build_original_scaled(profile, profile.total_epochs(), steps_per_epoch)
}

/// An original schedule compressed or stretched to `total_epochs`, with
/// segment boundaries scaled proportionally (floored).
pub fn build_original_scaled(
    profile: Profile,
    total_epochs: usize,
    steps_per_epoch: usize,
) -> Result<Schedule> {
    check_steps_per_epoch(steps_per_epoch)?;
    if total_epochs == 0 {
        return Err(Error::Config("total_epochs must be >= 1".into()));
    }
    let native = profile.total_epochs();
    let segs = profile.segments();
    let mut lrs = vec![0.0; total_epochs];
    for (i, lr) in lrs.iter_mut().enumerate() {
        // map epoch back onto the native profile via proportional boundaries
        let mut cur = segs[0].1;
        for &(start, seg_lr) in segs {
            let scaled = start * total_epochs / native;
            if i >= scaled {
                cur = seg_lr;
            }
        }
        *lr = cur;
    }
    Ok(Schedule {
        kind: ScheduleKind::Step,
        budget_epochs: total_epochs,
        steps_per_epoch,
        source: format!("{profile:?}@{total_epochs}ep"),
        table: Table::PerEpoch(lrs),
    })
}

/// Fine-tuning: constant at the original's final rate for `t` epochs.
pub fn build_ft(original: &Schedule, t: usize) -> Result<Schedule> {
    if t == 0 {
        return Err(Error::Config("ft budget must be >= 1 epoch".into()));
    }
    let lr = original.final_lr();
    Ok(Schedule {
        kind: ScheduleKind::Ft,
        budget_epochs: t,
        steps_per_epoch: original.steps_per_epoch,
        source: original.source.clone(),
        table: Table::PerEpoch(vec![lr; t]),
    })
}

/// Learning-rate rewinding: replay the original's last `t` epochs.
pub fn build_lrw(original: &Schedule, t: usize) -> Result<Schedule> {
    if t == 0 {
        return Err(Error::Config("lrw budget must be >= 1 epoch".into()));
    }
    let total = original.budget_epochs;
    if t > total {
        return Err(Error::Range(format!(
            "cannot rewind {t} epochs of a {total}-epoch schedule"
        )));
    }
    let all = original.per_epoch_lrs();
    Ok(Schedule {
        kind: ScheduleKind::Lrw,
        budget_epochs: t,
        steps_per_epoch: original.steps_per_epoch,
        source: original.source.clone(),
        table: Table::PerEpoch(all[total - t..].to_vec()),
    })
}

fn check_warmup_frac(warmup_frac: f64) -> Result<()> {
    if !(0.0..0.5).contains(&warmup_frac) {
        return Err(Error::Config(format!(
            "warmup fraction {warmup_frac} not in [0, 0.5)"
        )));
    }
    Ok(())
}

/// Scaled restarting: cosine warmup (in whole epochs) from the original's
/// final rate to its peak, then 10× drops at 50% and 75% of the remaining
/// (post-warmup) epochs, floored.
pub fn build_slr(original: &Schedule, t: usize, warmup_frac: f64) -> Result<Schedule> {
    if t < 2 {
        return Err(Error::Config("slr budget must be >= 2 epochs".into()));
    }
    check_warmup_frac(warmup_frac)?;
    let alpha_init = original.final_lr();
    let alpha_max = original.max_lr();
    let warmup = (warmup_frac * t as f64).floor() as usize;
    let remaining = t - warmup;
    let drop1 = warmup + (0.50 * remaining as f64).floor() as usize;
    let drop2 = warmup + (0.75 * remaining as f64).floor() as usize;
    let mut lrs = Vec::with_capacity(t);
    for e in 0..t {
        let lr = if e < warmup {
            if e == 0 {
                alpha_init
            } else {
                let p = e as f64 / warmup as f64;
                alpha_init + (alpha_max - alpha_init) * (1.0 - (PI * p).cos()) / 2.0
            }
        } else if e < drop1 {
            alpha_max
        } else if e < drop2 {
            alpha_max / 10.0
        } else {
            alpha_max / 100.0
        };
        lrs.push(lr);
    }
    Ok(Schedule {
        kind: ScheduleKind::Slr,
        budget_epochs: t,
        steps_per_epoch: original.steps_per_epoch,
        source: original.source.clone(),
        table: Table::PerEpoch(lrs),
    })
}

/// 1-cycle restarting evaluated per optimizer step: cosine warmup from the
/// original's final rate to `alpha_max` (default: the original's peak), then
/// cosine anneal to `alpha_min`.
pub fn build_clr(
    original: &Schedule,
    t: usize,
    warmup_frac: f64,
    alpha_max: Option<f64>,
    alpha_min: f64,
) -> Result<Schedule> {
    if t == 0 {
        return Err(Error::Config("clr budget must be >= 1 epoch".into()));
    }
    check_warmup_frac(warmup_frac)?;
    let alpha_max = alpha_max.unwrap_or_else(|| original.max_lr());
    if alpha_min >= alpha_max {
        return Err(Error::Config(format!(
            "alpha_min {alpha_min} must be < alpha_max {alpha_max}"
        )));
    }
    let total_steps = t * original.steps_per_epoch;
    let warmup_steps = (warmup_frac * total_steps as f64).floor() as usize;
    Ok(Schedule {
        kind: ScheduleKind::Clr,
        budget_epochs: t,
        steps_per_epoch: original.steps_per_epoch,
        source: original.source.clone(),
        table: Table::Clr {
            alpha_init: original.final_lr(),
            alpha_max,
            alpha_min,
            warmup_steps,
            total_steps,
        },
    })
}

/// The rate LRW would use at retrain epoch 0 — the rewinding heuristic for
/// choosing a restart learning rate.
pub fn restart_lr_heuristic(original: &Schedule, t: usize) -> Result<f64> {
    if t == 0 || t > original.budget_epochs {
        return Err(Error::Range(format!(
            "budget {t} outside original schedule of {} epochs",
            original.budget_epochs
        )));
    }
    Ok(original.lr_at_epoch(original.budget_epochs - t))
}

pub const CLR_ALPHA_MIN_DEFAULT: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;

    fn cifar(spe: usize) -> Schedule {
        build_original(Profile::Cifar, spe).unwrap()
    }

    #[test]
    fn original_cifar_matches_table() {
        let s = cifar(1);
        assert_eq!(s.lr_at_epoch(0), 0.1);
        assert_eq!(s.lr_at_epoch(79), 0.1);
        assert_eq!(s.lr_at_epoch(80), 0.01);
        assert_eq!(s.lr_at_epoch(119), 0.01);
        assert_eq!(s.lr_at_epoch(120), 0.001);
        assert_eq!(s.lr_at_epoch(159), 0.001);
    }

    #[test]
    fn original_imagenet_matches_table() {
        let s = build_original(Profile::Imagenet, 1).unwrap();
        assert_eq!(s.lr_at_epoch(0), 0.1);
        assert_eq!(s.lr_at_epoch(45), 0.01);
        assert_eq!(s.lr_at_epoch(60), 0.001);
        assert_eq!(s.budget_epochs, 90);
    }

    #[test]
    fn ft_is_constant_at_final_lr() {
        let s = cifar(3);
        let ft = build_ft(&s, 40).unwrap();
        assert_eq!(ft.total_steps(), 120);
        for step in 0..ft.total_steps() {
            assert_eq!(ft.lr_at(step), 0.001);
        }
        let im = build_original(Profile::Imagenet, 1).unwrap();
        let ft = build_ft(&im, 20).unwrap();
        assert_eq!(ft.lr_at(0), 0.001);

        // constant-c original stays constant
        let mut c = cifar(1);
        c.table = Table::PerEpoch(vec![0.05; 160]);
        let ft = build_ft(&c, 7).unwrap();
        assert!(ft.emit().iter().all(|&(_, _, lr)| lr == 0.05));
    }

    #[test]
    fn lrw_72_rewinds_to_0_01_then_drops_at_32() {
        let s = cifar(2);
        let lrw = build_lrw(&s, 72).unwrap();
        for e in 0..32 {
            assert_eq!(lrw.lr_at_epoch(e), 0.01, "epoch {e}");
        }
        for e in 32..72 {
            assert_eq!(lrw.lr_at_epoch(e), 0.001, "epoch {e}");
        }
    }

    #[test]
    fn lrw_full_budget_equals_original() {
        let s = cifar(4);
        let lrw = build_lrw(&s, 160).unwrap();
        assert_eq!(lrw.per_epoch_lrs(), s.per_epoch_lrs());
        assert!(build_lrw(&s, 161).is_err());
    }

    #[test]
    fn lrw_40_coincides_with_ft() {
        let s = cifar(1);
        let lrw = build_lrw(&s, 40).unwrap();
        let ft = build_ft(&s, 40).unwrap();
        assert_eq!(lrw.per_epoch_lrs(), ft.per_epoch_lrs());
    }

    #[test]
    fn slr_72_has_warmup_7_drops_at_39_and_55() {
        let s = cifar(1);
        let slr = build_slr(&s, 72, 0.1).unwrap();
        assert_eq!(slr.lr_at_epoch(0), 0.001, "warmup starts at original final lr");
        assert!(slr.lr_at_epoch(6) < 0.1);
        for e in 7..39 {
            assert_eq!(slr.lr_at_epoch(e), 0.1, "epoch {e}");
        }
        for e in 39..55 {
            assert!((slr.lr_at_epoch(e) - 0.01).abs() < 1e-15, "epoch {e}");
        }
        for e in 55..72 {
            assert!((slr.lr_at_epoch(e) - 0.001).abs() < 1e-15, "epoch {e}");
        }
        // final epoch equals original final lr
        assert!((slr.final_lr() - 0.001).abs() < 1e-15);
    }

    #[test]
    fn slr_degenerate_warmup_t4() {
        let s = cifar(1);
        let slr = build_slr(&s, 4, 0.0).unwrap();
        let lrs = slr.per_epoch_lrs();
        assert_eq!(lrs[0], 0.1);
        assert_eq!(lrs[1], 0.1);
        assert!((lrs[2] - 0.01).abs() < 1e-15);
        assert!((lrs[3] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn clr_hits_endpoints_exactly() {
        let s = cifar(10);
        let clr = build_clr(&s, 20, 0.1, None, 1e-5).unwrap();
        let total = clr.total_steps();
        let warmup = (0.1 * total as f64).floor() as usize;
        assert_eq!(clr.lr_at(0), 0.001);
        assert_eq!(clr.lr_at(warmup), 0.1);
        assert_eq!(clr.lr_at(total - 1), 1e-5);
    }

    #[test]
    fn clr_monotone_up_then_down() {
        let s = cifar(7);
        let clr = build_clr(&s, 13, 0.1, None, 1e-5).unwrap();
        let total = clr.total_steps();
        let warmup = (0.1 * total as f64).floor() as usize;
        for step in 1..total {
            let (prev, cur) = (clr.lr_at(step - 1), clr.lr_at(step));
            if step <= warmup {
                assert!(cur >= prev, "warmup must not decrease at {step}");
            } else {
                assert!(cur <= prev, "anneal must not increase at {step}");
            }
        }
    }

    #[test]
    fn clr_anneal_midpoint_is_halfway() {
        let s = cifar(100);
        let clr = build_clr(&s, 10, 0.0, None, 1e-5).unwrap();
        let total = clr.total_steps();
        // no warmup: anneal spans all steps; midpoint of [0, total-1]
        let mid = (total - 1) / 2;
        let want = (0.1 + 1e-5) / 2.0;
        let step_res = (clr.lr_at(mid - 1) - clr.lr_at(mid + 1)).abs();
        assert!(
            (clr.lr_at(mid) - want).abs() <= step_res,
            "midpoint {} vs {want}",
            clr.lr_at(mid)
        );
    }

    #[test]
    fn clr_defaults_follow_cifar_profile() {
        let s = cifar(5);
        let clr = build_clr(&s, 40, 0.1, None, CLR_ALPHA_MIN_DEFAULT).unwrap();
        let Table::Clr {
            alpha_init,
            alpha_max,
            alpha_min,
            ..
        } = clr.table
        else {
            panic!()
        };
        assert_eq!(alpha_init, 0.001);
        assert_eq!(alpha_max, 0.1);
        assert_eq!(alpha_min, 1e-5);
    }

    #[test]
    fn restart_heuristic_reads_rewound_rate() {
        let s = cifar(1);
        assert_eq!(restart_lr_heuristic(&s, 72).unwrap(), 0.01);
        assert_eq!(restart_lr_heuristic(&s, 160).unwrap(), 0.1);
        assert_eq!(restart_lr_heuristic(&s, 25).unwrap(), 0.001);
        assert!(restart_lr_heuristic(&s, 161).is_err());
    }

    #[test]
    fn emit_rows_cover_every_step() {
        let s = cifar(2);
        let ft = build_ft(&s, 3).unwrap();
        let rows = ft.emit();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|&(_, _, lr)| lr == 0.001));

        let lrw = build_lrw(&s, 72).unwrap();
        let rows = lrw.emit();
        assert_eq!(rows.first().unwrap().2, 0.01);
        assert_eq!(rows.last().unwrap().2, 0.001);

        let clr = build_clr(&s, 5, 0.1, None, 1e-5).unwrap();
        assert_eq!(clr.emit().len(), 5 * 2);
    }

    #[test]
    fn builders_are_pure() {
        let s = cifar(3);
        for _ in 0..2 {
            assert_eq!(build_slr(&s, 31, 0.1).unwrap(), build_slr(&s, 31, 0.1).unwrap());
            assert_eq!(
                build_clr(&s, 31, 0.1, None, 1e-5).unwrap(),
                build_clr(&s, 31, 0.1, None, 1e-5).unwrap()
            );
        }
    }

    #[test]
    fn scaled_original_keeps_drop_proportions() {
        let s = build_original_scaled(Profile::Cifar, 40, 1).unwrap();
        assert_eq!(s.lr_at_epoch(0), 0.1);
        assert_eq!(s.lr_at_epoch(19), 0.1);
        assert_eq!(s.lr_at_epoch(20), 0.01);
        assert_eq!(s.lr_at_epoch(29), 0.01);
        assert_eq!(s.lr_at_epoch(30), 0.001);
        assert_eq!(s.lr_at_epoch(39), 0.001);
    }

    #[test]
    fn warmup_fraction_validated() {
        let s = cifar(1);
        assert!(build_slr(&s, 10, 0.5).is_err());
        assert!(build_clr(&s, 10, -0.1, None, 1e-5).is_err());
        assert!(build_clr(&s, 10, 0.1, Some(1e-6), 1e-5).is_err());
    }

    #[test]
    fn lr_positive_everywhere() {
        let s = cifar(3);
        for sched in [
            build_ft(&s, 9).unwrap(),
            build_lrw(&s, 100).unwrap(),
            build_slr(&s, 33, 0.1).unwrap(),
            build_clr(&s, 33, 0.1, None, 1e-5).unwrap(),
        ] {
            for (_, _, lr) in sched.emit() {
                assert!(lr > 0.0);
            }
        }
    }
}
