use std::io::Write;

use super::LossBreakdown;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: LossBreakdown,
    /// Per-layer soft utilization.
    pub utilization: Vec<Vec<f64>>,
}

impl StepMetrics {
    /// Per-layer `max_i |U_i − 1/e|`.
    pub fn spread(&self) -> Vec<f64> {
        self.utilization
            .iter()
            .map(|u| {
                let target = 1.0 / u.len() as f64;
                u.iter().map(|x| (x - target).abs()).fold(0.0, f64::max)
            })
            .collect()
    }
}

/// One row per step and layer: `step,l_rec,l_load,total,layer,u_0..u_{e-1}`.
pub fn write_metrics_csv<W: Write>(out: &mut W, metrics: &[StepMetrics]) -> Result<()> {
    let e = metrics.first().and_then(|m| m.utilization.first()).map_or(0, |u| u.len());
    write!(out, "step,l_rec,l_load,total,layer")?;
    for i in 0..e {
        write!(out, ",u_{i}")?;
    }
    writeln!(out)?;
    for m in metrics {
        for (layer, u) in m.utilization.iter().enumerate() {
            write!(out, "{},{},{},{},{layer}", m.step, m.loss.l_rec, m.loss.l_load, m.loss.total)?;
            for x in u {
                write!(out, ",{x}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}
