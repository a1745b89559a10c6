//! CSV rendering of the command reports.

use physdiff_core::metrics::MetricReport;

pub const METRIC_HEADER: &str = "set,image,psnr,ssim,uciqe,uiqm,uicm,uism,uiconm";

fn num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:.6}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), num)
}

pub fn metric_row(set: &str, image: &str, r: &MetricReport) -> String {
    format!(
        "{set},{image},{},{},{},{},{},{},{}",
        opt(r.psnr),
        opt(r.ssim),
        num(r.uciqe),
        num(r.uiqm),
        num(r.uicm),
        num(r.uism),
        num(r.uiconm)
    )
}
