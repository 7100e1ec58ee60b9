//! CSV reports.

use crate::metrics::MetricReport;
use crate::net::EpochLog;

pub const METRICS_HEADER: &str = "map_name,method,n_directions,psnr_db,ssim,nrmse,voxels";
pub const TRAINING_HEADER: &str = "epoch,lr,train_loss,val_loss";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub map: String,
    pub method: String,
    pub n_directions: usize,
    pub report: MetricReport,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out += &format!(
            "{},{},{},{:.6},{:.6},{:.6},{}\n",
            r.map, r.method, r.n_directions, r.report.psnr, r.report.ssim, r.report.nrmse, r.report.voxels
        );
    }
    out
}

pub fn training_csv(history: &[EpochLog]) -> String {
    let mut out = String::from(TRAINING_HEADER);
    out.push('\n');
    for h in history {
        let val = h.val_loss.map(|v| format!("{v:.8}")).unwrap_or_default();
        out += &format!("{},{:e},{:.8},{}\n", h.epoch, h.lr, h.train_loss, val);
    }
    out
}
