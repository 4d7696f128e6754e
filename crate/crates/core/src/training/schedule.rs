use serde::{Deserialize, Serialize};

/// Learning-rate schedule as a multiple of the base rate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    #[default]
    Constant,
    /// Linear warmup over `warmup_frac` of the steps, then cosine decay to
    /// `final_ratio × base` at the last step.
    WarmupCosine { warmup_frac: f64, final_ratio: f64 },
}

impl Schedule {
    pub fn warmup_cosine() -> Self {
        Schedule::WarmupCosine {
            warmup_frac: 0.05,
            final_ratio: 0.1,
        }
    }

    /// Rate for 0-based `step` of `total`.
    pub fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::WarmupCosine {
                warmup_frac,
                final_ratio,
            } => {
                let warmup = ((warmup_frac * total as f64).ceil() as usize).max(1);
                if step < warmup {
                    return base * (step + 1) as f64 / warmup as f64;
                }
                let span = total.saturating_sub(warmup + 1).max(1);
                let progress = ((step - warmup) as f64 / span as f64).min(1.0);
                let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                base * (final_ratio + (1.0 - final_ratio) * cosine)
            }
        }
    }
}
