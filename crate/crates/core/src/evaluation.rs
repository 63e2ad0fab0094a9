//! Selective-prediction metrics.
//!
//! Every example falls in one outcome cell of (classifier correct?) x
//! (deferred?). A deferred example is answered with its gold label, so the
//! system (SP) accuracy is `(n_a + n_b + n_d) / N`. The policy (DP) is
//! scored against the ideal decision "defer iff the classifier is wrong".

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    /// Kept, classifier correct.
    pub n_a: usize,
    /// Deferred, classifier correct.
    pub n_b: usize,
    /// Kept, classifier incorrect.
    pub n_c: usize,
    /// Deferred, classifier incorrect.
    pub n_d: usize,
}

impl OutcomeCounts {
    pub fn total(&self) -> usize {
        self.n_a + self.n_b + self.n_c + self.n_d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub cl_acc: f64,
    /// Macro F1 of the classifier over classes present in gold.
    pub cl_f1: f64,
    pub dp_acc: f64,
    /// F1 of the defer class.
    pub dp_f1: f64,
    /// Macro F1 over keep/defer, logged for comparison with `dp_f1`.
    pub dp_f1_macro: f64,
    pub sp_acc: f64,
    /// Macro F1 of the system labels (gold where deferred).
    pub sp_f1: f64,
    pub deferral_rate: f64,
    pub counts: OutcomeCounts,
}

pub fn outcome_matrix(cl_preds: &[usize], gold: &[usize], actions: &[bool]) -> Result<OutcomeCounts> {
    if cl_preds.len() != gold.len() || actions.len() != gold.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} predictions, {} gold, {} actions",
            cl_preds.len(),
            gold.len(),
            actions.len()
        )));
    }
    let mut c = OutcomeCounts::default();
    for ((p, g), &defer) in cl_preds.iter().zip(gold).zip(actions) {
        match (p == g, defer) {
            (true, false) => c.n_a += 1,
            (true, true) => c.n_b += 1,
            (false, false) => c.n_c += 1,
            (false, true) => c.n_d += 1,
        }
    }
    Ok(c)
}

/// Per-class F1 averaged over the classes that occur in `gold`.
pub fn macro_f1(preds: &[usize], gold: &[usize], k: usize) -> f64 {
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    let mut present = vec![false; k];
    for (&p, &g) in preds.iter().zip(gold) {
        present[g] = true;
        if p == g {
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let scores: Vec<f64> = (0..k)
        .filter(|&c| present[c])
        .map(|c| f1(tp[c], fp[c], fn_[c]))
        .collect();
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// `2TP / (2TP + FP + FN)`, zero when undefined.
fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

pub fn compute_metrics(cl_preds: &[usize], gold: &[usize], actions: &[bool]) -> Result<MetricsRecord> {
    let counts = outcome_matrix(cl_preds, gold, actions)?;
    if gold.is_empty() {
        return Err(Error::invalid("metrics of an empty set"));
    }
    let k = cl_preds.iter().chain(gold).copied().max().unwrap_or(0) + 1;
    let n = gold.len() as f64;
    let OutcomeCounts { n_a, n_b, n_c, n_d } = counts;

    let sp_labels: Vec<usize> = cl_preds
        .iter()
        .zip(gold)
        .zip(actions)
        .map(|((&p, &g), &defer)| if defer { g } else { p })
        .collect();
    let ideal: Vec<usize> = cl_preds.iter().zip(gold).map(|(p, g)| (p != g) as usize).collect();
    let taken: Vec<usize> = actions.iter().map(|&a| a as usize).collect();

    Ok(MetricsRecord {
        cl_acc: (n_a + n_b) as f64 / n,
        cl_f1: macro_f1(cl_preds, gold, k),
        dp_acc: (n_a + n_d) as f64 / n,
        dp_f1: f1(n_d, n_b, n_c),
        dp_f1_macro: macro_f1(&taken, &ideal, 2),
        sp_acc: (n_a + n_b + n_d) as f64 / n,
        sp_f1: macro_f1(&sp_labels, gold, k),
        deferral_rate: (n_b + n_d) as f64 / n,
        counts,
    })
}

impl MetricsRecord {
    /// Aligned two-column text table.
    pub fn to_table(&self) -> String {
        let rows = [
            ("cl_acc", self.cl_acc),
            ("cl_f1", self.cl_f1),
            ("dp_acc", self.dp_acc),
            ("dp_f1", self.dp_f1),
            ("dp_f1_macro", self.dp_f1_macro),
            ("sp_acc", self.sp_acc),
            ("sp_f1", self.sp_f1),
            ("deferral_rate", self.deferral_rate),
        ];
        let mut s = String::new();
        for (k, v) in rows {
            s.push_str(&format!("{k:<14} {v:>8.4}\n"));
        }
        let c = &self.counts;
        s.push_str(&format!(
            "{:<14} a={} b={} c={} d={}\n",
            "outcomes", c.n_a, c.n_b, c.n_c, c.n_d
        ));
        s
    }
}

/// One point of the deferral-weight sweep. Failed runs carry NaN metrics
/// and the error text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub d: f64,
    pub deferral_rate: f64,
    pub sp_acc: f64,
    pub cl_acc: f64,
    pub dp_acc: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub const SWEEP_HEADER: &str = "d,deferral_rate,sp_acc,cl_acc,dp_acc,seed";

impl SweepRow {
    pub fn from_metrics(d: f64, seed: u64, m: &MetricsRecord) -> Self {
        Self {
            d,
            deferral_rate: m.deferral_rate,
            sp_acc: m.sp_acc,
            cl_acc: m.cl_acc,
            dp_acc: m.dp_acc,
            seed,
            error: None,
        }
    }

    pub fn failed(d: f64, seed: u64, error: String) -> Self {
        Self {
            d,
            deferral_rate: f64::NAN,
            sp_acc: f64::NAN,
            cl_acc: f64::NAN,
            dp_acc: f64::NAN,
            seed,
            error: Some(error),
        }
    }
}

/// CSV text with the fixed header, one line per row.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.d, r.deferral_rate, r.sp_acc, r.cl_acc, r.dp_acc, r.seed
        ));
    }
    s
}
