use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic gradients with finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / (|analytic| + 1e-8)
    pub max_rel_error: f64,
    /// (input index, flat coordinate) where the maximum occurred
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// coordinates whose central stencil crossed a kink and were
    /// differenced one-sidedly instead
    pub one_sided: usize,
    /// coordinates with a kink on both sides at every tried step
    pub unresolved: usize,
    /// coordinates re-estimated by Ridders extrapolation
    pub refined: usize,
}

/// Which coordinates to probe.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Coordinates {
    #[default]
    All,
    /// (input index, flat coordinate) pairs
    Only(Vec<(usize, usize)>),
}

// one-sided fourth-order stencil on offsets 0, 1, .., 4 (scaled by the side)
const ONE_SIDED: [(f64, f64); 5] = [(0.0, -25.0), (1.0, 48.0), (2.0, -36.0), (3.0, 16.0), (4.0, -3.0)];

/// Checks the tape gradient of a scalar function of several tensors against
/// finite differences with step `h`, over every coordinate.
///
/// Uses the central difference `(f(x+h) − f(x−h)) / 2h`; coordinates that
/// disagree by more than 1e-6 relative are re-estimated by Ridders
/// extrapolation before they count. `f` receives a fresh tape and one leaf per
/// input tensor and must return a scalar.
///
/// Max-pooling and the cross-entropy clamp make `f` piecewise smooth. When
/// a stencil point lands on a different piece than `x` (detected through
/// [`Tape::branch_signature`]), the one-sided fourth-order stencil on the
/// side that stays on the piece is used; failing both, the step shrinks
/// tenfold up to twice.
pub fn grad_check<F>(f: F, point: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    grad_check_at(f, point, h, &Coordinates::All)
}

pub fn grad_check_at<F>(
    f: F,
    point: &[Tensor<f64>],
    h: f64,
    coords: &Coordinates,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>], track: bool| -> Result<(f64, u64, Vec<Option<Tensor<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                if t.requires_grad() == track {
                    tape.leaf_ref(t)
                } else {
                    let mut t = t.clone();
                    t.set_requires_grad(track);
                    tape.leaf(t)
                }
            })
            .collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss).data()[0];
        let sig = tape.branch_signature();
        if !track {
            return Ok((value, sig, Vec::new()));
        }
        let mut grads = tape.backward(loss)?;
        Ok((value, sig, vars.iter().map(|&v| grads.take(v)).collect()))
    };

    let (f0, sig0, analytic) = eval(point, true)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        one_sided: 0,
        unresolved: 0,
        refined: 0,
    };
    let list: Vec<(usize, usize)> = match coords {
        Coordinates::All => point
            .iter()
            .enumerate()
            .flat_map(|(ti, t)| (0..t.numel()).map(move |ci| (ti, ci)))
            .collect(),
        Coordinates::Only(c) => c.clone(),
    };
    // probes never need gradients, so they can be borrowed as they are
    let mut probe = point.to_vec();
    probe.iter_mut().for_each(|t| t.set_requires_grad(false));
    for (ti, ci) in list {
        let x0 = point[ti].data()[ci];
        let mut at = |offset: f64| -> Result<Option<f64>> {
            probe[ti].data_mut()[ci] = x0 + offset;
            let (v, sig, _) = eval(&probe, false)?;
            probe[ti].data_mut()[ci] = x0;
            Ok((sig == sig0).then_some(v))
        };
        let mut numeric = None;
        let mut step = h;
        'scales: for _ in 0..3 {
            if let (Some(fp), Some(fm)) = (at(step)?, at(-step)?) {
                numeric = Some((fp - fm) / (2.0 * step));
                break;
            }
            for side in [1.0, -1.0] {
                let mut s = 0.0;
                let mut ok = true;
                for &(o, c) in &ONE_SIDED {
                    let v = if o == 0.0 { Some(f0) } else { at(side * o * step)? };
                    match v {
                        Some(v) => s += c * (v - f0),
                        None => {
                            ok = false;
                            break;
                        }
                    }
                }
                if ok {
                    numeric = Some(side * s / (12.0 * step));
                    report.one_sided += 1;
                    break 'scales;
                }
            }
            step /= 10.0;
        }
        let Some(mut numeric) = numeric else {
            report.unresolved += 1;
            continue;
        };
        let a = analytic[ti].as_ref().map_or(0.0, |g| g.data()[ci]);
        let mut rel = (a - numeric).abs() / (a.abs() + 1e-8);
        if rel > REFINE_ABOVE {
            // roundoff in f(x±h) is about ulp(f)/h, which swamps the 1e-8
            // floor when the true derivative is zero, so extrapolate from a
            // wide start as well as a narrow one and keep whichever tableau
            // reports the smaller error
            let mut central = |hh: f64| -> Result<Option<f64>> {
                Ok(match (at(hh)?, at(-hh)?) {
                    (Some(p), Some(m)) => Some((p - m) / (2.0 * hh)),
                    _ => None,
                })
            };
            let narrow = ridders(&mut central, 10.0 * h)?;
            let wide = ridders(&mut central, 1e-2)?;
            let best = match (narrow, wide) {
                (Some(n), Some(w)) => Some(if w.1 < n.1 { w } else { n }),
                (n, w) => n.or(w),
            };
            if let Some((r, _)) = best {
                numeric = r;
                rel = (a - numeric).abs() / (a.abs() + 1e-8);
                report.refined += 1;
            }
        }
        report.coordinates += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel;
            report.worst = Some((ti, ci));
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

const REFINE_ABOVE: f64 = 1e-6;

/// Ridders' polynomial extrapolation of central differences with steps
/// shrinking from `h0` by 1.4 per column. Steps whose stencil crosses a
/// kink restart the tableau. Returns the estimate and its error bound.
fn ridders(central: &mut impl FnMut(f64) -> Result<Option<f64>>, h0: f64) -> Result<Option<(f64, f64)>> {
    const CON2: f64 = 1.4 * 1.4;
    const SAFE: f64 = 2.0;
    let mut err = f64::MAX;
    let mut ans = None;
    let mut prev: Vec<f64> = Vec::new();
    let mut hh = h0;
    for _ in 0..10 {
        let Some(d) = central(hh)? else {
            prev.clear();
            hh /= 1.4;
            continue;
        };
        let mut cur = vec![d];
        let mut fac = CON2;
        for j in 1..=prev.len() {
            let v = (cur[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= CON2;
            let e = (v - cur[j - 1]).abs().max((v - prev[j - 1]).abs());
            if e <= err {
                err = e;
                ans = Some(v);
            }
            cur.push(v);
        }
        if let (Some(&c), Some(&p)) = (cur.last(), prev.last()) {
            if (c - p).abs() >= SAFE * err {
                break;
            }
        }
        prev = cur;
        hh /= 1.4;
    }
    Ok(ans.map(|a| (a, err)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let report = grad_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                let s = tape.scale(sq, 1.5)?;
                tape.sum(s)
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
    }

    #[test]
    fn zero_function_has_zero_error() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let report = grad_check(
            |tape, v| {
                let z = tape.scale(v[0], 0.0)?;
                tape.sum(z)
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn kink_near_the_point_uses_the_smooth_side() {
        // max-pool of (x, c) with x just below c: the + side crosses the kink
        let x = Tensor::new(vec![2, 1], vec![0.9995, 1.0]).unwrap();
        let report = grad_check(
            |tape, v| {
                let (p, _) = tape.seq_max_pool(v[0], 1, 2, None)?;
                let sq = tape.mul(p, p)?;
                tape.sum(sq)
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert_eq!(report.unresolved, 0);
        assert!(report.one_sided >= 1, "{report:?}");
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn ridders_recovers_a_smooth_derivative() {
        let mut central = |h: f64| -> Result<Option<f64>> { Ok(Some(((1.0 + h).exp() - (1.0 - h).exp()) / (2.0 * h))) };
        let (d, _) = ridders(&mut central, 0.1).unwrap().unwrap();
        assert!((d - 1f64.exp()).abs() < 1e-12, "{d}");
    }

    #[test]
    fn subset_checks_only_the_listed_coordinates() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let report = grad_check_at(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                tape.sum(sq)
            },
            &[x],
            1e-3,
            &Coordinates::Only(vec![(0, 2)]),
        )
        .unwrap();
        assert_eq!(report.coordinates, 1);
        assert_eq!(report.worst, Some((0, 2)));
    }
}
