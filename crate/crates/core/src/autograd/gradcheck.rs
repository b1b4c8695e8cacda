// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Half-width of the central difference.
    pub eps: f64,
    /// Denominator floor, so near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Entries probed per input; `None` probes all of them.
    pub max_entries: Option<usize>,
    /// Chooses the probed entries.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-6,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |g − ĝ| / max(|g|, |ĝ|, floor)` over probed entries.
    pub max_rel_err: f64,
    /// `(input, entry)` where the maximum occurred.
    pub worst: (usize, usize),
    pub n_checked: usize,
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences of `f` itself.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let y = f(&mut tape, &vars)?;
        if tape.value(y).len() != 1 {
            return Err(Error::NonScalarLoss(tape.shape(y).to_vec()));
        }
        Ok(tape.value(y).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let y = f(&mut tape, &vars)?;
    tape.backward(y)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut xs = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        n_checked: 0,
    };
    for i in 0..xs.len() {
        let n = xs[i].len();
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for j in entries {
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + opts.eps;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = x0 - opts.eps;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > report.max_rel_err || !rel.is_finite() {
                report.max_rel_err = rel;
                report.worst = (i, j);
            }
            report.n_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_on_a_polynomial() {
        let x = Tensor::from_vec(vec![0.5, -1.5, 2.0]);
        let r = gradcheck(
            &[x],
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let cube = t.mul(sq, v[0])?;
                Ok(t.sum(cube))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.n_checked, 3);
        assert!(r.max_rel_err < 1e-7, "{r:?}");
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // `clamp01` passes no gradient where it saturates, while the
        // function still moves when the step crosses the boundary.
        let x = Tensor::from_vec(vec![1.0]);
        let r = gradcheck(&[x], |t, v| Ok(t.clamp01(v[0])), &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_err > 0.1);
    }

    #[test]
    fn samples_entries() {
        let x = Tensor::from_vec(vec![1.0; 50]);
        let opts = GradCheckOptions {
            max_entries: Some(7),
            ..GradCheckOptions::default()
        };
        let r = gradcheck(&[x], |t, v| Ok(t.sum(v[0])), &opts).unwrap();
        assert_eq!(r.n_checked, 7);
    }

    #[test]
    fn rejects_non_scalar_outputs() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(gradcheck(&[x], |_, v| Ok(v[0]), &GradCheckOptions::default()).is_err());
    }
}
