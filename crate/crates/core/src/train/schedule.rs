use crate::error::{Error, Result};
use crate::kv::{join_list, KvMap};

/// Full-scale decay boundaries.
pub const PAPER_DECAY_STEPS: [u64; 4] = [50_000, 100_000, 200_000, 300_000];

/// Step decay: `initial_lr · factor^k` where `k` counts boundaries `<= step`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub initial_lr: f64,
    pub decay_steps: Vec<u64>,
    pub factor: f64,
}

impl Default for Schedule {
    /// Full-scale boundaries shrunk by 100 for desk-sized runs.
    fn default() -> Self {
        Schedule::scaled(100).expect("100 keeps boundaries distinct")
    }
}

impl Schedule {
    pub fn paper() -> Self {
        Schedule {
            initial_lr: 1e-4,
            decay_steps: PAPER_DECAY_STEPS.to_vec(),
            factor: 0.5,
        }
    }

    /// Full-scale schedule with every boundary divided by `divisor`.
    pub fn scaled(divisor: u64) -> Result<Self> {
        if divisor == 0 {
            return Err(Error::Config("schedule divisor must be positive".into()));
        }
        let s = Schedule {
            decay_steps: PAPER_DECAY_STEPS.iter().map(|s| s / divisor).collect(),
            ..Schedule::paper()
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.decay_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "decay steps {:?} must be strictly increasing",
                self.decay_steps
            )));
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(Error::Config(format!(
                "initial learning rate must be positive, got {}",
                self.initial_lr
            )));
        }
        if !(self.factor.is_finite() && self.factor > 0.0) {
            return Err(Error::Config(format!(
                "decay factor must be positive, got {}",
                self.factor
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let k = self.decay_steps.iter().filter(|&&s| s <= step).count();
        self.initial_lr * self.factor.powi(k as i32)
    }

    pub fn write_kv(&self, map: &mut KvMap, prefix: &str) {
        map.set(format!("{prefix}initial_lr"), self.initial_lr);
        map.set(format!("{prefix}decay_steps"), join_list(&self.decay_steps));
        map.set(format!("{prefix}factor"), self.factor);
    }

    /// Reads a schedule. `{prefix}divisor`, if present and no explicit
    /// `decay_steps` is given, rescales the full-scale boundaries.
    pub fn from_kv(map: &KvMap, prefix: &str) -> Result<Self> {
        map.check_known(prefix, &["initial_lr", "decay_steps", "factor", "divisor"])?;
        let k = |s: &str| format!("{prefix}{s}");
        let base = match map.parse_opt::<u64>(&k("divisor"))? {
            Some(d) => Schedule::scaled(d)?,
            None => Schedule::default(),
        };
        let s = Schedule {
            initial_lr: map.parse_or(&k("initial_lr"), base.initial_lr)?,
            decay_steps: map.parse_list_or(&k("decay_steps"), base.decay_steps)?,
            factor: map.parse_or(&k("factor"), base.factor)?,
        };
        s.validate()?;
        Ok(s)
    }
}

/// Learning rate at `step` for the given schedule.
pub fn schedule_lr(s: &Schedule, step: u64) -> f64 {
    s.lr_at(step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_examples() {
        let s = Schedule::paper();
        assert_eq!(s.lr_at(0), 1e-4);
        assert_eq!(s.lr_at(49_999), 1e-4);
        assert_eq!(s.lr_at(50_000), 5e-5);
        assert_eq!(s.lr_at(1_000_000), 6.25e-6);
        assert_eq!(schedule_lr(&s, 300_000), 1e-4 / 16.0);
    }

    #[test]
    fn divisor_scales_boundaries() {
        assert_eq!(Schedule::default().decay_steps, vec![500, 1000, 2000, 3000]);
        assert!(Schedule::scaled(0).is_err());
        // boundaries collapse to 0, 0, 1, 1
        assert!(Schedule::scaled(200_000).is_err());
    }

    #[test]
    fn kv_round_trip_and_validation() {
        let mut m = KvMap::new();
        Schedule::paper().write_kv(&mut m, "schedule.");
        assert_eq!(
            Schedule::from_kv(&m, "schedule.").unwrap(),
            Schedule::paper()
        );
        let mut m = KvMap::new();
        m.set("schedule.divisor", 10);
        assert_eq!(
            Schedule::from_kv(&m, "schedule.").unwrap().decay_steps,
            vec![5000, 10000, 20000, 30000]
        );
        m.set("schedule.decay_steps", "10,5");
        assert!(Schedule::from_kv(&m, "schedule.").is_err());
    }
}
