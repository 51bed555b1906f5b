//! Exponential variogram: empirical estimation from point pairs and a
//! least-squares model fit used by the Kriging solver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible sill. A constant field has zero empirical variance
/// everywhere; the floor keeps the Kriging system well posed while leaving
/// predictions unaffected (weights are invariant to scaling the variogram).
pub const SILL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Variogram {
    pub nugget: f64,
    pub sill: f64,
    pub range_km: f64,
}

impl Variogram {
    /// gamma(h) = nugget + (sill - nugget) * (1 - exp(-3h / range)).
    /// gamma(0) is exactly 0 so Kriging stays exact at observed points.
    pub fn gamma(&self, h_km: f64) -> f64 {
        if h_km <= 0.0 {
            return 0.0;
        }
        self.nugget + (self.sill - self.nugget) * (1.0 - (-3.0 * h_km / self.range_km).exp())
    }

    /// Used when too few observations exist to fit: no nugget, sill from
    /// the channel variance, range a third of the domain diagonal.
    pub fn fallback(variance: f64, domain_diagonal_km: f64) -> Self {
        Variogram {
            nugget: 0.0,
            sill: variance.max(SILL_FLOOR),
            range_km: (domain_diagonal_km / 3.0).max(1e-3),
        }
    }

    fn validate(mut self) -> Self {
        self.nugget = self.nugget.max(0.0);
        self.sill = self.sill.max(self.nugget).max(SILL_FLOOR);
        self.range_km = self.range_km.max(1e-3);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmpiricalBin {
    pub h_center_km: f64,
    pub gamma: f64,
    pub pairs: usize,
}

/// Bins (distance, half squared difference) samples into `bins` equal-width
/// distance classes over (0, max distance] and averages each class.
pub fn empirical_semivariogram(samples: &[(f64, f64)], bins: usize) -> Vec<EmpiricalBin> {
    assert!(bins > 0);
    let h_max = samples.iter().map(|s| s.0).fold(0.0f64, f64::max);
    if h_max <= 0.0 {
        return Vec::new();
    }
    let width = h_max / bins as f64;
    let mut sums = vec![0.0f64; bins];
    let mut counts = vec![0usize; bins];
    for &(h, g) in samples {
        if h <= 0.0 {
            continue;
        }
        let b = (((h / width).ceil() as usize).max(1) - 1).min(bins - 1);
        sums[b] += g;
        counts[b] += 1;
    }
    (0..bins)
        .filter(|&b| counts[b] > 0)
        .map(|b| EmpiricalBin {
            h_center_km: (b as f64 + 0.5) * width,
            gamma: sums[b] / counts[b] as f64,
            pairs: counts[b],
        })
        .collect()
}

/// Weighted least squares of the exponential model over the empirical bins:
/// a grid search over range candidates, with (nugget, sill - nugget) solved
/// in closed form for each candidate and clamped to their bounds.
pub fn fit_exponential(bins: &[EmpiricalBin]) -> Option<Variogram> {
    if bins.is_empty() {
        return None;
    }
    let h_max = bins.iter().map(|b| b.h_center_km).fold(0.0f64, f64::max);
    if h_max <= 0.0 {
        return None;
    }

    let sse_of = |nugget: f64, psill: f64, range: f64| -> f64 {
        let vg = Variogram {
            nugget,
            sill: nugget + psill,
            range_km: range,
        };
        bins.iter()
            .map(|b| {
                let e = b.gamma - vg.gamma(b.h_center_km);
                b.pairs as f64 * e * e
            })
            .sum()
    };

    let mut best: Option<(f64, Variogram)> = None;
    for i in 1..=60 {
        let range = h_max * 1.5 * i as f64 / 60.0;
        // Model gamma = n + p * g(h) with g fixed by the range candidate.
        let g = |h: f64| 1.0 - (-3.0 * h / range).exp();
        let (mut sw, mut swg, mut swgg, mut swy, mut swyg) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for b in bins {
            let w = b.pairs as f64;
            let gh = g(b.h_center_km);
            sw += w;
            swg += w * gh;
            swgg += w * gh * gh;
            swy += w * b.gamma;
            swyg += w * b.gamma * gh;
        }
        let det = sw * swgg - swg * swg;
        let (mut n, mut p) = if det.abs() > 1e-12 {
            (
                (swy * swgg - swyg * swg) / det,
                (sw * swyg - swg * swy) / det,
            )
        } else {
            (0.0, if swgg > 0.0 { swyg / swgg } else { 0.0 })
        };
        if n < 0.0 {
            n = 0.0;
            p = if swgg > 0.0 { swyg / swgg } else { 0.0 };
        }
        if p < 0.0 {
            p = 0.0;
            n = (swy / sw).max(0.0);
        }
        let sse = sse_of(n, p, range);
        if best.as_ref().is_none_or(|(b_sse, _)| sse < *b_sse) {
            best = Some((
                sse,
                Variogram {
                    nugget: n,
                    sill: n + p,
                    range_km: range,
                }
                .validate(),
            ));
        }
    }
    best.map(|(_, vg)| vg)
}

/// Fits from one spatial snapshot of (location, value) observations.
/// Locations are (x, y) in km.
pub fn fit_variogram(obs: &[((f64, f64), f64)], bins: usize) -> Result<Variogram> {
    let mut distinct: Vec<(f64, f64)> = obs.iter().map(|o| o.0).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if obs.len() < 4 || distinct.len() < 4 {
        return Err(Error::Grid(format!(
            "variogram fit needs at least 4 distinct observation points, got {}",
            distinct.len()
        )));
    }
    let mut samples = Vec::with_capacity(obs.len() * (obs.len() - 1) / 2);
    for i in 0..obs.len() {
        for j in i + 1..obs.len() {
            let (pa, za) = obs[i];
            let (pb, zb) = obs[j];
            let h = ((pa.0 - pb.0).powi(2) + (pa.1 - pb.1).powi(2)).sqrt();
            samples.push((h, 0.5 * (za - zb) * (za - zb)));
        }
    }
    let bins = empirical_semivariogram(&samples, bins);
    fit_exponential(&bins)
        .ok_or_else(|| Error::Grid("variogram fit produced no usable bins".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gamma_is_zero_at_origin_and_rises_to_sill() {
        let vg = Variogram {
            nugget: 0.2,
            sill: 1.2,
            range_km: 10.0,
        };
        assert_eq!(vg.gamma(0.0), 0.0);
        assert!(vg.gamma(1e-9) > 0.2);
        assert!(vg.gamma(5.0) < vg.gamma(10.0));
        // At h = range the model reaches 95% of the way to the sill.
        let at_range = vg.gamma(10.0);
        assert!((at_range - (0.2 + 1.0 * (1.0 - (-3.0f64).exp()))).abs() < 1e-12);
        assert!(vg.gamma(1e6) <= 1.2 + 1e-12);
    }

    #[test]
    fn constant_field_fits_at_the_floor() {
        let obs: Vec<((f64, f64), f64)> = (0..5)
            .flat_map(|i| (0..5).map(move |j| ((i as f64, j as f64), 7.0)))
            .collect();
        let vg = fit_variogram(&obs, 12).unwrap();
        assert_eq!(vg.nugget, 0.0);
        assert_eq!(vg.sill, SILL_FLOOR);
    }

    #[test]
    fn two_distant_clusters_give_hand_computed_bins() {
        // Within-cluster differences are 0; across clusters z differs by 10,
        // so every cross pair contributes 0.5 * 100 = 50.
        let mut obs: Vec<((f64, f64), f64)> = Vec::new();
        for (cx, z) in [(0.0, 1.0), (50.0, 11.0)] {
            obs.push(((cx, 0.0), z));
            obs.push(((cx + 0.2, 0.0), z));
            obs.push(((cx, 0.2), z));
        }
        let mut samples = Vec::new();
        for i in 0..obs.len() {
            for j in i + 1..obs.len() {
                let (pa, za) = obs[i];
                let (pb, zb) = obs[j];
                let h = ((pa.0 - pb.0).powi(2) + (pa.1 - pb.1).powi(2)).sqrt();
                samples.push((h, 0.5 * (za - zb) * (za - zb)));
            }
        }
        let bins = empirical_semivariogram(&samples, 12);
        assert_eq!(bins.len(), 2);
        assert!(bins[0].h_center_km < 5.0);
        assert_eq!(bins[0].gamma, 0.0);
        assert!(bins[1].h_center_km > 45.0);
        assert!((bins[1].gamma - 50.0).abs() < 1e-9);
    }

    #[test]
    fn fit_needs_four_distinct_points() {
        let obs = vec![((0.0, 0.0), 1.0), ((1.0, 0.0), 2.0), ((0.0, 1.0), 3.0)];
        assert!(fit_variogram(&obs, 12).is_err());
        let colocated = vec![
            ((0.0, 0.0), 1.0),
            ((0.0, 0.0), 2.0),
            ((1.0, 0.0), 3.0),
            ((0.0, 1.0), 4.0),
        ];
        assert!(fit_variogram(&colocated, 12).is_err());
    }

    /// Dense Cholesky used only to draw correlated samples for the
    /// generate-then-fit check; independent of the fitting code.
    fn cholesky(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let mut l = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[i][j];
                for k in 0..j {
                    s -= l[i][k] * l[j][k];
                }
                if i == j {
                    l[i][j] = s.max(1e-12).sqrt();
                } else {
                    l[i][j] = s / l[j][j];
                }
            }
        }
        l
    }

    #[test]
    fn recovers_a_known_range_from_generated_fields() {
        let truth = Variogram {
            nugget: 0.0,
            sill: 1.0,
            range_km: 10.0,
        };
        let mut fitted_ranges = Vec::new();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<(f64, f64)> = (0..200)
                .map(|_| (rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0)))
                .collect();
            // Covariance of the stationary field: C(h) = sill - gamma(h).
            let cov: Vec<Vec<f64>> = pts
                .iter()
                .map(|a| {
                    pts.iter()
                        .map(|b| {
                            let h = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                            truth.sill - truth.gamma(h)
                        })
                        .collect()
                })
                .collect();
            let l = cholesky(&cov);
            let xi: Vec<f64> = (0..200)
                .map(|_| {
                    // Box-Muller standard normal.
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                })
                .collect();
            let z: Vec<f64> = (0..200)
                .map(|i| (0..=i).map(|k| l[i][k] * xi[k]).sum())
                .collect();
            let obs: Vec<((f64, f64), f64)> = pts.into_iter().zip(z).collect();
            fitted_ranges.push(fit_variogram(&obs, 12).unwrap().range_km);
        }
        fitted_ranges.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = fitted_ranges[2];
        assert!(
            (7.0..=13.0).contains(&median),
            "median fitted range {median} outside 30% of 10 km (all: {fitted_ranges:?})"
        );
    }
}
