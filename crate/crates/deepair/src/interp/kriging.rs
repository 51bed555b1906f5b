//! Ordinary Kriging: the bordered linear system with a Lagrange multiplier
//! enforcing unit weight sum, solved densely in f64.

use super::Variogram;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrigeObs {
    pub x_km: f64,
    pub y_km: f64,
    pub value: f64,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Solves the ordinary-Kriging weight systems for `m` targets against `n`
/// observations. `gamma_obs` is the n*n matrix of pairwise observation
/// semivariances, `gamma_targets` is m rows of n target-to-observation
/// semivariances. Returns m*n weights, or None when the bordered system is
/// singular.
pub fn solve_ordinary_weights(
    gamma_obs: &[f64],
    gamma_targets: &[f64],
    n: usize,
    m: usize,
) -> Option<Vec<f64>> {
    debug_assert_eq!(gamma_obs.len(), n * n);
    debug_assert_eq!(gamma_targets.len(), m * n);
    let dim = n + 1;

    // Augmented [A | B]: A is the bordered matrix, B holds one RHS per
    // target: (gamma(target, obs_i).., 1).
    let width = dim + m;
    let mut a = vec![0.0f64; dim * width];
    for i in 0..n {
        for j in 0..n {
            a[i * width + j] = gamma_obs[i * n + j];
        }
        a[i * width + n] = 1.0;
        a[n * width + i] = 1.0;
    }
    for (k, row) in gamma_targets.chunks_exact(n).enumerate() {
        for i in 0..n {
            a[i * width + dim + k] = row[i];
        }
        a[n * width + dim + k] = 1.0;
    }

    let scale = a
        .iter()
        .take(dim * width)
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1.0);

    // Forward elimination with partial pivoting.
    for col in 0..dim {
        let pivot_row = (col..dim)
            .max_by(|&r1, &r2| {
                a[r1 * width + col]
                    .abs()
                    .partial_cmp(&a[r2 * width + col].abs())
                    .unwrap()
            })
            .unwrap();
        if a[pivot_row * width + col].abs() < 1e-12 * scale {
            return None;
        }
        if pivot_row != col {
            for k in 0..width {
                a.swap(col * width + k, pivot_row * width + k);
            }
        }
        let pivot = a[col * width + col];
        for row in col + 1..dim {
            let factor = a[row * width + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for k in col..width {
                a[row * width + k] -= factor * a[col * width + k];
            }
        }
    }

    // Back substitution for every RHS column; the Lagrange multiplier in
    // row n is solved but not returned.
    let mut weights = vec![0.0f64; m * n];
    for k in 0..m {
        let mut x = vec![0.0f64; dim];
        for row in (0..dim).rev() {
            let mut s = a[row * width + dim + k];
            for j in row + 1..dim {
                s -= a[row * width + j] * x[j];
            }
            x[row] = s / a[row * width + row];
        }
        weights[k * n..(k + 1) * n].copy_from_slice(&x[..n]);
    }
    Some(weights)
}

/// Inverse-distance-weighting fallback (power 2) for configurations where
/// the Kriging system is singular. A target sitting exactly on an
/// observation takes its value.
pub fn idw_fill(obs: &[KrigeObs], targets: &[(f64, f64)]) -> Vec<f64> {
    targets
        .iter()
        .map(|&t| {
            let mut num = 0.0;
            let mut den = 0.0;
            for o in obs {
                let d = dist((o.x_km, o.y_km), t);
                if d < 1e-12 {
                    return o.value;
                }
                let w = 1.0 / (d * d);
                num += w * o.value;
                den += w;
            }
            num / den
        })
        .collect()
}

/// Predicts values at `targets` by ordinary Kriging. Co-located
/// observations are averaged before solving; if the system is singular even
/// then, prediction falls back to inverse-distance weighting with a logged
/// warning.
pub fn krige(obs: &[KrigeObs], targets: &[(f64, f64)], vg: &Variogram) -> Vec<f64> {
    assert!(!obs.is_empty(), "krige requires at least one observation");
    if targets.is_empty() {
        return Vec::new();
    }

    let mut merged: Vec<KrigeObs> = Vec::with_capacity(obs.len());
    for o in obs {
        match merged
            .iter_mut()
            .find(|m| dist((m.x_km, m.y_km), (o.x_km, o.y_km)) < 1e-9)
        {
            Some(m) => m.value = (m.value + o.value) / 2.0,
            None => merged.push(*o),
        }
    }
    if merged.len() < obs.len() {
        log::warn!(
            "kriging: averaged {} co-located observations before solving",
            obs.len() - merged.len()
        );
    }

    let n = merged.len();
    let mut gamma_obs = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            gamma_obs[i * n + j] =
                vg.gamma(dist((merged[i].x_km, merged[i].y_km), (merged[j].x_km, merged[j].y_km)));
        }
    }
    let mut gamma_targets = vec![0.0f64; targets.len() * n];
    for (k, t) in targets.iter().enumerate() {
        for i in 0..n {
            gamma_targets[k * n + i] = vg.gamma(dist((merged[i].x_km, merged[i].y_km), *t));
        }
    }

    match solve_ordinary_weights(&gamma_obs, &gamma_targets, n, targets.len()) {
        Some(weights) => (0..targets.len())
            .map(|k| {
                (0..n)
                    .map(|i| weights[k * n + i] * merged[i].value)
                    .sum::<f64>()
            })
            .collect(),
        None => {
            log::warn!(
                "kriging system singular for {} observations; falling back to inverse-distance \
                 weighting",
                n
            );
            idw_fill(&merged, targets)
        }
    }
}
