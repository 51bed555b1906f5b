//! Patch construction: a square window of filled sensor channels around a
//! center cell, with leave-one-out exclusion of the center's own readings
//! when it hosts a station.

use tensorcore::Tensor;

use crate::error::{Error, Result};
use crate::gridstore::{local_time_codes, UrbanDynamicsMap};
use crate::interp::{CellRect, FillEngine, PreparedData};

/// One timestep of model input. `channels` holds the filled non-auxiliary
/// channels as [14, edge, edge]; calendar features travel as codes and are
/// embedded inside the model.
#[derive(Debug, Clone)]
pub struct PatchData {
    pub channels: Tensor,
    pub dow: usize,
    pub hour: usize,
    pub center: (usize, usize),
    pub t: usize,
}

pub struct PatchBuilder {
    engine: FillEngine,
    edge: usize,
    non_aux: Vec<usize>,
    utc_offset_hours: i32,
}

impl PatchBuilder {
    pub fn new(prepared: &PreparedData, edge: usize) -> Result<Self> {
        if edge % 2 == 0 || edge < 3 {
            return Err(Error::Model(format!(
                "patch edge must be odd and at least 3, got {edge}"
            )));
        }
        Ok(PatchBuilder {
            engine: FillEngine::new(
                prepared.policy.clone(),
                prepared.variograms.clone(),
                &prepared.map.schema,
                prepared.map.spec.cell_km,
            ),
            edge,
            non_aux: prepared.map.schema.non_auxiliary_indices(),
            utc_offset_hours: prepared.utc_offset_hours,
        })
    }

    pub fn edge(&self) -> usize {
        self.edge
    }

    /// Builds the patch centered at `center` for hour `t`. Cells beyond the
    /// grid boundary stay 0, which is the channel mean on the standardized
    /// scale. Observations are interpolated from stations inside the patch
    /// footprint; `exclude` removes one cell's readings from that set.
    pub fn build(
        &mut self,
        map: &UrbanDynamicsMap,
        center: (usize, usize),
        t: usize,
        exclude: Option<(usize, usize)>,
    ) -> Result<PatchData> {
        if t >= map.hours() {
            return Err(Error::Model(format!(
                "hour {t} outside the map's {} hours",
                map.hours()
            )));
        }
        if center.0 >= map.spec.rows || center.1 >= map.spec.cols {
            return Err(Error::Model(format!(
                "center {center:?} outside the {}x{} grid",
                map.spec.rows, map.spec.cols
            )));
        }
        let r = (self.edge / 2) as isize;
        let base_row = center.0 as isize - r;
        let base_col = center.1 as isize - r;
        let row0 = base_row.max(0) as usize;
        let col0 = base_col.max(0) as usize;
        let row_end = (center.0 + r as usize).min(map.spec.rows - 1);
        let col_end = (center.1 + r as usize).min(map.spec.cols - 1);
        let rect = CellRect {
            row0,
            col0,
            rows: row_end - row0 + 1,
            cols: col_end - col0 + 1,
        };

        let plane = self.edge * self.edge;
        let mut data = vec![0.0f32; self.non_aux.len() * plane];
        for (ci, &c) in self.non_aux.iter().enumerate() {
            let vals = self.engine.fill_channel_rect(map, t, c, rect, exclude);
            for (v, (gr, gc)) in vals.into_iter().zip(rect.cells()) {
                let pr = (gr as isize - base_row) as usize;
                let pc = (gc as isize - base_col) as usize;
                data[ci * plane + pr * self.edge + pc] = v;
            }
        }
        let (dow, hour) = local_time_codes(map.timestamp(t), self.utc_offset_hours);
        Ok(PatchData {
            channels: Tensor::new(vec![self.non_aux.len(), self.edge, self.edge], data)?,
            dow: dow as usize,
            hour: hour as usize,
            center,
            t,
        })
    }

    /// The input window for a forecast at `target_t`: patches for the
    /// `window` consecutive hours [target_t - window, target_t).
    pub fn window(
        &mut self,
        map: &UrbanDynamicsMap,
        center: (usize, usize),
        target_t: usize,
        window: usize,
        exclude: Option<(usize, usize)>,
    ) -> Result<Vec<PatchData>> {
        if target_t < window {
            return Err(Error::Model(format!(
                "target hour {target_t} has no room for a {window}-hour input window"
            )));
        }
        (target_t - window..target_t)
            .map(|t| self.build(map, center, t, exclude))
            .collect()
    }
}
