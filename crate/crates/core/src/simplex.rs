//! Nelder-Mead downhill simplex minimization.
//!
//! Used as the derivative-free refinement backend for rigid calibration. The
//! implementation follows the standard reflection / expansion / contraction /
//! shrink scheme with the usual coefficients (1, 2, 0.5, 0.5) and restarts
//! from the best vertex to escape premature collapse of the simplex.

#[derive(Clone, Debug)]
pub struct SimplexOptions {
    /// Evaluation budget across all restarts.
    pub max_evaluations: usize,
    /// Stop when the spread of objective values across the simplex falls
    /// below this absolute value.
    pub f_tolerance: f64,
    /// Stop when every vertex lies within this distance (per coordinate) of
    /// the best vertex.
    pub x_tolerance: f64,
    /// Number of fresh simplices built around the incumbent after convergence.
    pub restarts: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            max_evaluations: 40_000,
            f_tolerance: 1e-30,
            x_tolerance: 1e-13,
            restarts: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
}

pub fn minimize<F>(mut f: F, x0: &[f64], steps: &[f64], opts: &SimplexOptions) -> SimplexResult
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x0.len(), steps.len(), "one initial step per coordinate");
    let mut best = x0.to_vec();
    let mut best_value = f(&best);
    let mut evaluations = 1;
    let mut scale = 1.0;

    for _ in 0..=opts.restarts {
        if evaluations >= opts.max_evaluations {
            break;
        }
        let scaled: Vec<f64> = steps.iter().map(|s| s * scale).collect();
        let (x, value, used) = run(
            &mut f,
            &best,
            &scaled,
            opts,
            opts.max_evaluations - evaluations,
        );
        evaluations += used;
        if value <= best_value {
            best = x;
            best_value = value;
        }
        scale *= 0.1;
    }

    SimplexResult {
        x: best,
        value: best_value,
        evaluations,
    }
}

fn run<F>(
    f: &mut F,
    start: &[f64],
    steps: &[f64],
    opts: &SimplexOptions,
    budget: usize,
) -> (Vec<f64>, f64, usize)
where
    F: FnMut(&[f64]) -> f64,
{
    let n = start.len();
    let mut vertices: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    vertices.push(start.to_vec());
    for (i, step) in steps.iter().enumerate() {
        let mut v = start.to_vec();
        v[i] += if *step == 0.0 { 1e-3 } else { *step };
        vertices.push(v);
    }
    let mut values: Vec<f64> = vertices.iter().map(|v| f(v)).collect();
    let mut evaluations = n + 1;

    let mut order: Vec<usize> = (0..=n).collect();
    while evaluations < budget {
        order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
        let (lo, hi, second) = (order[0], order[n], order[n - 1]);

        let f_spread = values[hi] - values[lo];
        let x_spread = vertices
            .iter()
            .flat_map(|v| v.iter().zip(&vertices[lo]).map(|(a, b)| (a - b).abs()))
            .fold(0.0_f64, f64::max);
        if f_spread <= opts.f_tolerance || x_spread <= opts.x_tolerance {
            break;
        }

        let mut centroid = vec![0.0; n];
        for &idx in order.iter().take(n) {
            for (c, x) in centroid.iter_mut().zip(&vertices[idx]) {
                *c += x / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&vertices[hi])
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };

        let reflected = along(-1.0);
        let fr = f(&reflected);
        evaluations += 1;

        if fr < values[lo] {
            let expanded = along(-2.0);
            let fe = f(&expanded);
            evaluations += 1;
            if fe < fr {
                vertices[hi] = expanded;
                values[hi] = fe;
            } else {
                vertices[hi] = reflected;
                values[hi] = fr;
            }
        } else if fr < values[second] {
            vertices[hi] = reflected;
            values[hi] = fr;
        } else {
            let (contracted, fc) = if fr < values[hi] {
                let c = along(-0.5);
                let fc = f(&c);
                (c, fc)
            } else {
                let c = along(0.5);
                let fc = f(&c);
                (c, fc)
            };
            evaluations += 1;
            if fc < values[hi].min(fr) {
                vertices[hi] = contracted;
                values[hi] = fc;
            } else {
                let anchor = vertices[lo].clone();
                for idx in 0..=n {
                    if idx == lo {
                        continue;
                    }
                    for (x, a) in vertices[idx].iter_mut().zip(&anchor) {
                        *x = a + 0.5 * (*x - a);
                    }
                    values[idx] = f(&vertices[idx]);
                    evaluations += 1;
                }
            }
        }
    }

    let lo = (0..=n)
        .min_by(|&i, &j| values[i].total_cmp(&values[j]))
        .unwrap_or(0);
    (vertices[lo].clone(), values[lo], evaluations)
}
