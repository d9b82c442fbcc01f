//! Central finite-difference check of tape gradients.

use rayon::prelude::*;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |a - n| / max(1e-8, |a| + |n|)` over all coordinates.
    pub max_rel_error: f64,
    /// `(input index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

/// Checks a scalar function of one tensor.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Var + Sync,
{
    grad_check_many(|t, xs| f(t, xs[0]), std::slice::from_ref(point), eps)
}

/// Checks a scalar function of several tensors. `f` receives one leaf per
/// point and must build the same computation every time it is called.
pub fn grad_check_many<F>(f: F, points: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Var + Sync,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |pts: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);

    let coords: Vec<(usize, usize, usize)> = {
        let mut flat = 0;
        let mut v = Vec::new();
        for (i, p) in points.iter().enumerate() {
            for c in 0..p.len() {
                v.push((i, c, flat));
                flat += 1;
            }
        }
        v
    };

    let errors: Vec<Result<(f64, usize, usize)>> = coords
        .par_iter()
        .map(|&(i, c, flat)| {
            let analytic = grads.get(vars[i]).map_or(0.0, |g| g.data()[c]);
            let mut pts = points.to_vec();
            let x0 = pts[i].data()[c];
            pts[i].data_mut()[c] = x0 + eps;
            let up = eval(&pts);
            pts[i].data_mut()[c] = x0 - eps;
            let down = eval(&pts);
            let numeric = (up - down) / (2.0 * eps);
            if !analytic.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite { index: flat });
            }
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            Ok((rel, i, c))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: coords.len(),
    };
    for e in errors {
        let (rel, i, c) = e?;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((i, c));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let sq = tape.mul(v, v);
        let s = tape.sum(sq);
        let g = tape.backward(s);
        assert_eq!(g.get(v).unwrap().data(), &[2.0, 4.0]);

        let r = grad_check(
            |t, v| {
                let sq = t.mul(v, v);
                t.sum(sq)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn non_finite_reports_coordinate() {
        // f overflows everywhere; the first coordinate is reported.
        let x = Tensor::from_vec(vec![1e300, 1.0]);
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v);
                t.sum(sq)
            },
            &x,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 0 }), "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx sum(x * c) is c; feeding the same leaf twice through `mul`
        // with a detached copy gives half the true gradient.
        let x = Tensor::from_vec(vec![0.5, -1.5]);
        let r = grad_check(
            |t, v| {
                let detached = t.leaf(t.value(v).clone());
                let sq = t.mul(v, detached);
                t.sum(sq)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.3, "{r:?}");
    }
}
