//! Box-constrained Nelder–Mead. Trial points are projected onto the box,
//! which keeps the simplex feasible without penalty terms.

#[derive(Debug, Clone, Copy)]
pub struct NmOptions {
    pub max_evals: usize,
    /// Stop once the spread of simplex values is below `f_tol_abs + f_tol_rel * |f_best|`...
    pub f_tol_abs: f64,
    pub f_tol_rel: f64,
    /// ...and the simplex fits in a cube of this side.
    pub x_tol: f64,
    /// Initial step, relative to the box width.
    pub init_step: f64,
}

impl Default for NmOptions {
    fn default() -> Self {
        NmOptions {
            max_evals: 400,
            f_tol_abs: 1e-16,
            f_tol_rel: 1e-10,
            x_tol: 1e-7,
            init_step: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NmResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub converged: bool,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, &l), &h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(l, h);
    }
}

pub fn minimize<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    opts: &NmOptions,
) -> NmResult {
    let n = x0.len();
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut start = x0.to_vec();
    project(&mut start, lo, hi);
    let mut simplex: Vec<Vec<f64>> = vec![start.clone()];
    for k in 0..n {
        let mut p = start.clone();
        let step = opts.init_step * (hi[k] - lo[k]);
        // Step inward if the start sits near the upper face.
        p[k] = if p[k] + step <= hi[k] {
            p[k] + step
        } else {
            p[k] - step
        };
        project(&mut p, lo, hi);
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| eval(p, &mut evals)).collect();

    let mut converged = false;
    while evals < opts.max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let spread = values[n] - values[0];
        let size = simplex[1..]
            .iter()
            .flat_map(|p| p.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if spread <= opts.f_tol_abs + opts.f_tol_rel * values[0].abs() && size <= opts.x_tol {
            converged = true;
            break;
        }

        let centroid: Vec<f64> = (0..n)
            .map(|k| simplex[..n].iter().map(|p| p[k]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&simplex[n])
                .map(|(c, w)| c + t * (w - c))
                .collect();
            project(&mut p, lo, hi);
            p
        };

        let xr = along(-1.0);
        let fr = eval(&xr, &mut evals);
        if fr < values[0] {
            let xe = along(-2.0);
            let fe = eval(&xe, &mut evals);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[n] {
            let xc = along(-0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < values[n].min(fr) {
            simplex[n] = xc;
            values[n] = fc;
            continue;
        }
        for i in 1..=n {
            let p: Vec<f64> = simplex[i]
                .iter()
                .zip(&simplex[0])
                .map(|(a, b)| b + 0.5 * (a - b))
                .collect();
            values[i] = eval(&p, &mut evals);
            simplex[i] = p;
        }
    }
    let best = (0..=n)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .expect("non-empty simplex");
    NmResult {
        x: simplex[best].clone(),
        f: values[best],
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let opts = NmOptions {
            max_evals: 5000,
            ..Default::default()
        };
        let r = minimize(f, &[-1.2, 1.0], &[-5.0, -5.0], &[5.0, 5.0], &opts);
        assert!(r.converged);
        assert!(
            (r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4,
            "{:?}",
            r.x
        );
    }

    #[test]
    fn active_bound() {
        let f = |x: &[f64]| (x[0] - 3.0).powi(2) + (x[1] + 1.0).powi(2);
        let r = minimize(
            f,
            &[0.5, 0.5],
            &[0.0, 0.0],
            &[1.0, 1.0],
            &NmOptions::default(),
        );
        assert!(
            (r.x[0] - 1.0).abs() < 1e-6 && r.x[1].abs() < 1e-6,
            "{:?}",
            r.x
        );
    }

    #[test]
    fn one_dimensional() {
        let r = minimize(
            |x: &[f64]| (x[0] - 0.3).powi(2),
            &[2.0],
            &[-3.0],
            &[3.0],
            &NmOptions::default(),
        );
        assert!((r.x[0] - 0.3).abs() < 1e-6);
    }
}
