//! Per-sample decision exports.

use std::fs::File;
use std::path::Path;

use dpn_core::data::{AugmentPolicy, ImageSample};
use dpn_core::metrics::{coherence, Coherence};
use dpn_core::model::Model;
use dpn_core::Real;

use crate::error::{Result, RunError};
use crate::trainer::forward_eval;

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> RunError + '_ {
    move |e| RunError::Format(format!("{}: {e}", path.display()))
}

/// Writes one row per (sample, DPM):
/// `sample_id,fine_label,coarse_label,dpm_index,score_1..score_n`.
/// Returns the number of rows.
pub fn dump_decisions<T: Real>(
    model: &Model<T>,
    samples: &[ImageSample],
    policy: &AugmentPolicy,
    batch_size: usize,
    out: &Path,
) -> Result<usize> {
    if model.dpm_count() == 0 {
        return Err(RunError::Config("the configured model has no DPMs to dump".into()));
    }
    let n = model.spec().dpm.n_aux;
    let file = File::create(out).map_err(|e| RunError::io(out, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header: Vec<String> = ["sample_id", "fine_label", "coarse_label", "dpm_index"].map(String::from).to_vec();
    header.extend((1..=n).map(|j| format!("score_{j}")));
    w.write_record(&header).map_err(csv_err(out))?;
    let mut rows = 0;
    let mut failed = None;
    forward_eval(model, samples, policy, batch_size, |start, logits, decisions| {
        for k in 0..logits.shape()[0] {
            let s = &samples[start + k];
            for (di, d) in decisions.iter().enumerate() {
                let mut rec = vec![
                    (start + k).to_string(),
                    s.label.to_string(),
                    s.coarse_label.map(|c| c.to_string()).unwrap_or_default(),
                    di.to_string(),
                ];
                rec.extend(d.row(k).iter().map(|v| v.to_string()));
                if let Err(e) = w.write_record(&rec) {
                    failed.get_or_insert(e);
                }
                rows += 1;
            }
        }
    })?;
    if let Some(e) = failed {
        return Err(csv_err(out)(e));
    }
    w.flush().map_err(|e| RunError::io(out, e))?;
    Ok(rows)
}

/// Coherence of `score_1` of the deepest DPM over fine labels, read back from a dump.
pub fn coherence_from_csv(path: &Path) -> Result<Coherence> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut rows: Vec<(usize, usize, f64)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(path))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let parse_err = |what: &str| RunError::Format(format!("{}: bad {what} in {rec:?}", path.display()));
        let fine: usize = field(1).parse().map_err(|_| parse_err("fine_label"))?;
        let dpm: usize = field(3).parse().map_err(|_| parse_err("dpm_index"))?;
        let score: f64 = field(4).parse().map_err(|_| parse_err("score_1"))?;
        rows.push((dpm, fine, score));
    }
    let last = rows
        .iter()
        .map(|r| r.0)
        .max()
        .ok_or_else(|| RunError::Format(format!("{}: no decision rows", path.display())))?;
    let (labels, scores): (Vec<usize>, Vec<f64>) = rows.iter().filter(|r| r.0 == last).map(|r| (r.1, r.2)).unzip();
    Ok(coherence(&scores, &labels))
}
