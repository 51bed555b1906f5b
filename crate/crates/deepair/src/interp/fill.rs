//! Spatial fill. Per hour and channel, kriged channels are interpolated
//! from that hour's observed cells and zero-fill channels get 0 on the
//! standardized scale; an optional excluded cell is treated as unobserved
//! everywhere so its estimate never depends on its own reading.

use std::collections::HashMap;
use std::sync::Arc;

use super::kriging::solve_ordinary_weights;
use super::{FillMethod, FillPolicy, Variogram};
use crate::gridstore::{ChannelGroup, ChannelSchema, UrbanDynamicsMap};

/// Axis-aligned rectangle of grid cells, row-major iteration order. Patch
/// fills pass the patch footprint clipped to the grid; whole-map fills pass
/// the full grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CellRect {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl CellRect {
    pub fn full(rows: usize, cols: usize) -> Self {
        CellRect {
            row0: 0,
            col0: 0,
            rows,
            cols,
        }
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.row0..self.row0 + self.rows)
            .flat_map(move |r| (self.col0..self.col0 + self.cols).map(move |c| (r, c)))
    }
}

/// Weights depend only on geometry, never on values, so one entry serves
/// every hour whose observed-cell footprint matches.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct SystemKey {
    channel: usize,
    rect: CellRect,
    /// Observed cells packed (row << 16) | col, in rect scan order.
    obs: Vec<u32>,
}

const WEIGHT_CACHE_CAP: usize = 2048;

pub struct FillEngine {
    policy: FillPolicy,
    variograms: Vec<Option<Variogram>>,
    cell_km: f64,
    is_aux: Vec<bool>,
    cache: HashMap<SystemKey, Arc<Vec<f64>>>,
}

impl FillEngine {
    pub fn new(
        policy: FillPolicy,
        variograms: Vec<Option<Variogram>>,
        schema: &ChannelSchema,
        cell_km: f64,
    ) -> Self {
        let is_aux = (0..schema.len())
            .map(|c| schema.group(c) == ChannelGroup::Auxiliary)
            .collect();
        FillEngine {
            policy,
            variograms,
            cell_km,
            is_aux,
            cache: HashMap::new(),
        }
    }

    fn dist_km(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        let dr = a.0 as f64 - b.0 as f64;
        let dc = a.1 as f64 - b.1 as f64;
        self.cell_km * (dr * dr + dc * dc).sqrt()
    }

    /// Returns values for every cell of `rect` in scan order: observed cells
    /// keep their reading, the rest get estimates. `exclude` is ignored for
    /// auxiliary channels, which are calendar features rather than station
    /// readings.
    pub fn fill_channel_rect(
        &mut self,
        map: &UrbanDynamicsMap,
        t: usize,
        channel: usize,
        rect: CellRect,
        exclude: Option<(usize, usize)>,
    ) -> Vec<f32> {
        let exclude = if self.is_aux[channel] { None } else { exclude };
        match self.policy.method(channel) {
            FillMethod::ZeroFill => rect
                .cells()
                .map(|(r, c)| {
                    if map.is_set(t, channel, r, c) && exclude != Some((r, c)) {
                        map.raw(t, channel, r, c)
                    } else {
                        0.0
                    }
                })
                .collect(),
            FillMethod::Krige => self.krige_rect(map, t, channel, rect, exclude),
        }
    }

    fn krige_rect(
        &mut self,
        map: &UrbanDynamicsMap,
        t: usize,
        channel: usize,
        rect: CellRect,
        exclude: Option<(usize, usize)>,
    ) -> Vec<f32> {
        let mut obs = Vec::new();
        let mut targets = Vec::new();
        for cell in rect.cells() {
            if map.is_set(t, channel, cell.0, cell.1) && exclude != Some(cell) {
                obs.push(cell);
            } else {
                targets.push(cell);
            }
        }
        if obs.is_empty() {
            log::warn!(
                "no usable observations for channel {} at hour {t}; zero-filling the footprint",
                map.schema.name(channel)
            );
            return vec![0.0; rect.cell_count()];
        }
        if targets.is_empty() {
            return rect.cells().map(|(r, c)| map.raw(t, channel, r, c)).collect();
        }

        let weights = self.weights_for(channel, rect, &obs, &targets);
        let z: Vec<f64> = obs
            .iter()
            .map(|&(r, c)| f64::from(map.raw(t, channel, r, c)))
            .collect();
        let n = z.len();
        let estimates: Vec<f32> = (0..targets.len())
            .map(|k| (0..n).map(|i| weights[k * n + i] * z[i]).sum::<f64>() as f32)
            .collect();

        let mut out = Vec::with_capacity(rect.cell_count());
        let mut next = 0;
        for cell in rect.cells() {
            if map.is_set(t, channel, cell.0, cell.1) && exclude != Some(cell) {
                out.push(map.raw(t, channel, cell.0, cell.1));
            } else {
                out.push(estimates[next]);
                next += 1;
            }
        }
        out
    }

    fn weights_for(
        &mut self,
        channel: usize,
        rect: CellRect,
        obs: &[(usize, usize)],
        targets: &[(usize, usize)],
    ) -> Arc<Vec<f64>> {
        let key = SystemKey {
            channel,
            rect,
            obs: obs.iter().map(|&(r, c)| ((r as u32) << 16) | c as u32).collect(),
        };
        if let Some(w) = self.cache.get(&key) {
            return Arc::clone(w);
        }
        let w = Arc::new(self.solve_weights(channel, obs, targets));
        if self.cache.len() >= WEIGHT_CACHE_CAP {
            self.cache.clear();
        }
        self.cache.insert(key, Arc::clone(&w));
        w
    }

    fn solve_weights(
        &self,
        channel: usize,
        obs: &[(usize, usize)],
        targets: &[(usize, usize)],
    ) -> Vec<f64> {
        let n = obs.len();
        let m = targets.len();
        if let Some(vg) = &self.variograms[channel] {
            let mut gamma_obs = vec![0.0f64; n * n];
            for i in 0..n {
                for j in i + 1..n {
                    let g = vg.gamma(self.dist_km(obs[i], obs[j]));
                    gamma_obs[i * n + j] = g;
                    gamma_obs[j * n + i] = g;
                }
            }
            let mut gamma_targets = vec![0.0f64; m * n];
            for (k, &tc) in targets.iter().enumerate() {
                for i in 0..n {
                    gamma_targets[k * n + i] = vg.gamma(self.dist_km(obs[i], tc));
                }
            }
            match solve_ordinary_weights(&gamma_obs, &gamma_targets, n, m) {
                Some(w) => return w,
                None => log::warn!(
                    "kriging system singular for {n} observations; using inverse-distance weights"
                ),
            }
        } else {
            debug_assert!(false, "kriged channel {channel} has no variogram");
            log::warn!("channel {channel} marked for kriging but has no variogram; using inverse-distance weights");
        }

        // Inverse-distance weights, power 2. Targets are by construction
        // unobserved cells, so every distance is positive.
        let mut w = vec![0.0f64; m * n];
        for (k, &tc) in targets.iter().enumerate() {
            let mut den = 0.0;
            for (i, &oc) in obs.iter().enumerate() {
                let d = self.dist_km(oc, tc);
                let wi = 1.0 / (d * d);
                w[k * n + i] = wi;
                den += wi;
            }
            for i in 0..n {
                w[k * n + i] /= den;
            }
        }
        w
    }

    #[cfg(test)]
    fn cached_systems(&self) -> usize {
        self.cache.len()
    }
}

/// Fills every cell of every channel-hour, returning a map with a complete
/// mask. The excluded cell, if any, is estimated from the remaining
/// observations rather than its own reading.
pub fn fill_map(
    map: &UrbanDynamicsMap,
    policy: &FillPolicy,
    variograms: &[Option<Variogram>],
    exclude: Option<(usize, usize)>,
) -> UrbanDynamicsMap {
    let mut engine = FillEngine::new(
        policy.clone(),
        variograms.to_vec(),
        &map.schema,
        map.spec.cell_km,
    );
    let rect = CellRect::full(map.spec.rows, map.spec.cols);
    let mut out = map.clone();
    for t in 0..map.hours() {
        for c in 0..map.schema.len() {
            let vals = engine.fill_channel_rect(map, t, c, rect, exclude);
            for (v, (r, col)) in vals.into_iter().zip(rect.cells()) {
                out.set(t, c, r, col, v);
            }
        }
    }
    out
}
