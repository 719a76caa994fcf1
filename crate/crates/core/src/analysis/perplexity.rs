// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::model::Model;

/// Summed next-token negative log-likelihood and the number of predicted
/// tokens in one sequence. Padding targets are skipped.
pub fn sequence_nll(model: &Model, ids: &[usize]) -> Result<(f64, usize)> {
    if ids.len() < 2 {
        return Ok((0.0, 0));
    }
    let out = model.forward(ids, None)?;
    let mut nll = 0.0f64;
    let mut count = 0usize;
    for t in 0..ids.len() - 1 {
        let target = ids[t + 1];
        if target == PAD {
            continue;
        }
        let row = out.logits.row(t);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + row.iter().map(|&v| (f64::from(v) - max).exp()).sum::<f64>().ln();
        nll += lse - f64::from(row[target]);
        count += 1;
    }
    Ok((nll, count))
}

/// `exp(mean NLL)` over every non-pad predicted token, teacher-forced.
pub fn perplexity(model: &Model, sequences: &[Vec<usize>]) -> Result<f64> {
    let mut nll = 0.0f64;
    let mut count = 0usize;
    for seq in sequences {
        let (n, c) = sequence_nll(model, seq)?;
        nll += n;
        count += c;
    }
    if count == 0 {
        return Err(Error::Evaluation("perplexity over an empty split".into()));
    }
    Ok((nll / count as f64).exp())
}
