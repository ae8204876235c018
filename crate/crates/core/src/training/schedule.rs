use serde::{Deserialize, Serialize};

use super::TrainingError;

/// Learning-rate schedule family with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant {
        #[serde(default = "default_constant_rate")]
        rate: f64,
    },
    /// `1 / sqrt(max(step, warmup))`.
    InverseSqrt {
        #[serde(default = "default_warmup")]
        warmup: u64,
    },
    /// Linear rise to `max_rate` at `cut` of training, then linear decay back
    /// to `max_rate / ratio`.
    SlantedTriangular {
        #[serde(default = "default_max_rate")]
        max_rate: f64,
        #[serde(default = "default_ratio")]
        ratio: f64,
        #[serde(default = "default_cut")]
        cut: f64,
    },
    Polynomial {
        #[serde(default = "default_max_rate")]
        start: f64,
        #[serde(default = "default_end_rate")]
        end: f64,
        #[serde(default = "default_power")]
        power: f64,
    },
}

fn default_constant_rate() -> f64 {
    0.001
}
fn default_warmup() -> u64 {
    10_000
}
fn default_max_rate() -> f64 {
    0.01
}
fn default_ratio() -> f64 {
    32.0
}
fn default_cut() -> f64 {
    0.1
}
fn default_end_rate() -> f64 {
    1e-6
}
fn default_power() -> f64 {
    0.5
}

impl Schedule {
    pub fn constant() -> Self {
        Schedule::Constant {
            rate: default_constant_rate(),
        }
    }

    pub fn inverse_sqrt() -> Self {
        Schedule::InverseSqrt {
            warmup: default_warmup(),
        }
    }

    pub fn slanted_triangular() -> Self {
        Schedule::SlantedTriangular {
            max_rate: default_max_rate(),
            ratio: default_ratio(),
            cut: default_cut(),
        }
    }

    pub fn polynomial() -> Self {
        Schedule::Polynomial {
            start: default_max_rate(),
            end: default_end_rate(),
            power: default_power(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Schedule::Constant { .. } => "constant",
            Schedule::InverseSqrt { .. } => "inverse_sqrt",
            Schedule::SlantedTriangular { .. } => "slanted_triangular",
            Schedule::Polynomial { .. } => "polynomial",
        }
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |msg: String| Err(TrainingError::InvalidSchedule(msg));
        match *self {
            Schedule::Constant { rate } if !(rate > 0.0 && rate.is_finite()) => {
                bad(format!("rate {rate} must be positive"))
            }
            Schedule::InverseSqrt { warmup: 0 } => bad("warmup must be positive".into()),
            Schedule::SlantedTriangular { max_rate, ratio, cut } => {
                if !(max_rate > 0.0 && max_rate.is_finite()) {
                    bad(format!("max_rate {max_rate} must be positive"))
                } else if !(ratio >= 1.0 && ratio.is_finite()) {
                    bad(format!("ratio {ratio} must be at least 1"))
                } else if !(cut > 0.0 && cut < 1.0) {
                    bad(format!("cut {cut} outside (0, 1)"))
                } else {
                    Ok(())
                }
            }
            Schedule::Polynomial { start, end, power } => {
                if !(start > 0.0 && end > 0.0 && start.is_finite() && end.is_finite()) {
                    bad(format!("rates {start}, {end} must be positive"))
                } else if !(power > 0.0 && power.is_finite()) {
                    bad(format!("power {power} must be positive"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for Schedule {
    type Err = String;

    /// Parses a schedule family name into its default parameters.
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "constant" => Ok(Schedule::constant()),
            "isr" | "inverse_sqrt" => Ok(Schedule::inverse_sqrt()),
            "st" | "slanted_triangular" => Ok(Schedule::slanted_triangular()),
            "poly" | "polynomial" => Ok(Schedule::polynomial()),
            other => Err(format!(
                "unknown schedule {other:?} (expected constant, isr, st or poly)"
            )),
        }
    }
}

/// A schedule bound to a step budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub schedule: Schedule,
    pub total_steps: u64,
}

impl ScheduleSpec {
    pub fn new(schedule: Schedule, total_steps: u64) -> Self {
        ScheduleSpec {
            schedule,
            total_steps,
        }
    }

    /// Step at which the slanted triangular schedule peaks.
    pub fn cutpoint(&self) -> Option<u64> {
        match self.schedule {
            Schedule::SlantedTriangular { cut, .. } => {
                Some(((self.total_steps as f64 * cut).floor() as u64).max(1))
            }
            _ => None,
        }
    }
}

pub fn learning_rate(spec: &ScheduleSpec, step: u64) -> Result<f64, TrainingError> {
    if step > spec.total_steps {
        return Err(TrainingError::StepOutOfRange {
            step,
            total: spec.total_steps,
        });
    }
    let rate = match spec.schedule {
        Schedule::Constant { rate } => rate,
        Schedule::InverseSqrt { warmup } => 1.0 / (step.max(warmup) as f64).sqrt(),
        Schedule::SlantedTriangular { max_rate, ratio, cut } => {
            let c = spec.cutpoint().expect("slanted triangular") as f64;
            let t = step as f64;
            let p = if t < c {
                t / c
            } else {
                1.0 - (t - c) / (c * (1.0 / cut - 1.0))
            };
            max_rate * (1.0 + p.clamp(0.0, 1.0) * (ratio - 1.0)) / ratio
        }
        Schedule::Polynomial { start, end, power } => {
            if spec.total_steps == 0 {
                end
            } else {
                let remaining = 1.0 - step as f64 / spec.total_steps as f64;
                (start - end) * remaining.powf(power) + end
            }
        }
    };
    Ok(rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lr(schedule: Schedule, total: u64, step: u64) -> f64 {
        learning_rate(&ScheduleSpec::new(schedule, total), step).unwrap()
    }

    #[test]
    fn table_values() {
        assert_eq!(lr(Schedule::constant(), 100, 37), 0.001);
        assert_eq!(lr(Schedule::inverse_sqrt(), 100_000, 0), 0.01);
        assert_eq!(lr(Schedule::inverse_sqrt(), 100_000, 10_000), 0.01);
        assert_eq!(lr(Schedule::inverse_sqrt(), 100_000, 40_000), 0.005);
        assert_eq!(lr(Schedule::polynomial(), 5000, 5000), 1e-6);
        assert_eq!(lr(Schedule::polynomial(), 5000, 0), 0.01);
        assert_eq!(lr(Schedule::slanted_triangular(), 1000, 100), 0.01);
        assert_eq!(lr(Schedule::slanted_triangular(), 1000, 0), 3.125e-4);
        assert!((lr(Schedule::slanted_triangular(), 1000, 1000) - 3.125e-4).abs() < 1e-18);
    }

    #[test]
    fn step_past_total_is_rejected() {
        let spec = ScheduleSpec::new(Schedule::constant(), 10);
        assert!(matches!(
            learning_rate(&spec, 11),
            Err(TrainingError::StepOutOfRange { step: 11, total: 10 })
        ));
    }

    #[test]
    fn tiny_budget_slanted_triangular_is_finite() {
        for step in 0..=3 {
            assert!(lr(Schedule::slanted_triangular(), 3, step).is_finite());
        }
    }

    #[test]
    fn parses_names_and_toml() {
        assert_eq!("st".parse::<Schedule>().unwrap(), Schedule::slanted_triangular());
        let s: Schedule = toml::from_str("kind = \"polynomial\"\npower = 1.0").unwrap();
        assert_eq!(
            s,
            Schedule::Polynomial {
                start: 0.01,
                end: 1e-6,
                power: 1.0
            }
        );
        assert!(Schedule::SlantedTriangular {
            max_rate: 0.01,
            ratio: 32.0,
            cut: 1.0
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn polynomial_non_increasing(total in 1u64..5000, a in 0u64..5000, b in 0u64..5000) {
            let (a, b) = (a.min(total), b.min(total));
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(lr(Schedule::polynomial(), total, hi) <= lr(Schedule::polynomial(), total, lo));
        }

        #[test]
        fn inverse_sqrt_non_increasing(a in 0u64..100_000, b in 0u64..100_000) {
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(lr(Schedule::inverse_sqrt(), 100_000, hi) <= lr(Schedule::inverse_sqrt(), 100_000, lo));
        }

        #[test]
        fn slanted_triangular_continuous(total in 20u64..10_000, frac in 0.0f64..1.0) {
            let step = ((total - 1) as f64 * frac) as u64;
            let a = lr(Schedule::slanted_triangular(), total, step);
            let b = lr(Schedule::slanted_triangular(), total, step + 1);
            let c = ScheduleSpec::new(Schedule::slanted_triangular(), total).cutpoint().unwrap() as f64;
            // one step moves the rate by at most the steeper slope
            let slope = 0.01 * (31.0 / 32.0) / c;
            prop_assert!((a - b).abs() <= slope + 1e-15);
        }
    }
}
