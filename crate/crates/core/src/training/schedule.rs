// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    /// Steps with injection and no position loss.
    pub stage1_steps: u64,
    /// Steps over which λ rises linearly from 0 to `lambda_max`.
    pub ramp_steps: u64,
    pub lambda_max: f32,
    pub lr: f32,
    /// Linear learning-rate warmup at the start of the run.
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f32>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            stage1_steps: 1500,
            ramp_steps: 1000,
            lambda_max: 1.0,
            lr: 3e-4,
            warmup_steps: 0,
            batch_size: 16,
            total_steps: 6000,
            seed: 0,
            checkpoint_every: 1000,
            eval_every: 50,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainSchedule {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
    pub fn validate(&self) -> Result<()> {
        if self.stage1_steps + self.ramp_steps > self.total_steps {
            return Err(Error::Config(format!(
                "stage1_steps {} + ramp_steps {} exceed total_steps {}",
                self.stage1_steps, self.ramp_steps, self.total_steps
            )));
        }
        if !(self.lambda_max > 0.0) {
            return Err(Error::Config(format!("lambda_max {} must be positive", self.lambda_max)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("schedule serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn lr_at(&self, step: u64) -> f32 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f32 / self.warmup_steps as f32
        } else {
            self.lr
        }
    }
}

/// λ_t: 0 before stage 2, then a linear ramp to `lambda_max` over
/// `ramp_steps`, constant afterwards.
pub fn lambda_at(step: u64, s: &TrainSchedule) -> f32 {
    if step < s.stage1_steps {
        return 0.0;
    }
    let into = step - s.stage1_steps;
    if s.ramp_steps == 0 || into >= s.ramp_steps {
        return s.lambda_max;
    }
    (f64::from(s.lambda_max) * into as f64 / s.ramp_steps as f64) as f32
}
