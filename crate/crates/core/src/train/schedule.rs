/// Weight of the KL term as a function of the global step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BetaSchedule {
    Constant(f64),
    /// `min(1, step / ramp_steps)`.
    Linear { ramp_steps: u64 },
    /// Sawtooth `min(1, 2·frac(step / cycle_steps))`.
    Cyclical { cycle_steps: u64 },
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule::Constant(1.0)
    }
}

impl BetaSchedule {
    pub fn beta_at(&self, step: u64) -> f64 {
        match *self {
            BetaSchedule::Constant(v) => v,
            BetaSchedule::Linear { ramp_steps } => {
                if ramp_steps == 0 {
                    1.0
                } else {
                    (step as f64 / ramp_steps as f64).min(1.0)
                }
            }
            BetaSchedule::Cyclical { cycle_steps } => {
                if cycle_steps == 0 {
                    1.0
                } else {
                    let frac = (step % cycle_steps) as f64 / cycle_steps as f64;
                    (2.0 * frac).min(1.0)
                }
            }
        }
    }
}
