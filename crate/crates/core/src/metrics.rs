//! Evaluation metrics: per-attribute and mean CCC, accuracy, macro recall,
//! macro-F1, and the composite validation score.

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Example};
use crate::error::{Error, Result};
use crate::losses::{NUM_ATTRIBUTES, NUM_CLASSES};
use crate::models::Model;

/// Denominators below this make CCC undefined; reported as 0.
pub const CCC_DEGENERATE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CccResult {
    pub value: f64,
    pub degenerate: bool,
}

/// Concordance correlation coefficient with population statistics.
pub fn ccc(pred: &[f64], truth: &[f64]) -> Result<CccResult> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "ccc needs equal lengths, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::InvalidArgument(format!("ccc needs at least 2 values, got {}", pred.len())));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = truth.iter().sum::<f64>() / n;
    let (mut spp, mut stt, mut spt) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(truth) {
        spp += (p - mp) * (p - mp);
        stt += (t - mt) * (t - mt);
        spt += (p - mp) * (t - mt);
    }
    let den = (spp + stt) / n + (mp - mt) * (mp - mt);
    if den < CCC_DEGENERATE {
        return Ok(CccResult { value: 0.0, degenerate: true });
    }
    Ok(CccResult {
        value: 2.0 * spt / n / den,
        degenerate: false,
    })
}

fn check_ids(pred: &[usize], truth: &[usize], classes: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction/truth length mismatch: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("no predictions to score".into()));
    }
    if let Some(&id) = pred.iter().chain(truth).find(|&&id| id >= classes) {
        return Err(Error::ClassOutOfRange { id, classes });
    }
    Ok(())
}

/// `K x K` counts, rows indexed by truth, columns by prediction.
pub fn confusion(pred: &[usize], truth: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    check_ids(pred, truth, classes)?;
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        m[t][p] += 1;
    }
    Ok(m)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_ids(pred, truth, usize::MAX)?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Unweighted mean of per-class recall over all `classes`, 0/0 counted as 0.
pub fn macro_recall(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    let m = confusion(pred, truth, classes)?;
    Ok((0..classes).map(|k| ratio(m[k][k], m[k].iter().sum())).sum::<f64>() / classes as f64)
}

/// Unweighted mean of per-class F1 over all `classes`, 0/0 counted as 0.
pub fn macro_f1(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    let m = confusion(pred, truth, classes)?;
    let total: f64 = (0..classes)
        .map(|k| {
            let tp = m[k][k];
            let support: u64 = m[k].iter().sum();
            let predicted: u64 = m.iter().map(|row| row[k]).sum();
            ratio(2 * tp, support + predicted)
        })
        .sum();
    Ok(total / classes as f64)
}

/// Flat evaluation summary; metrics without labelled examples are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ccc_v: Option<f64>,
    pub ccc_a: Option<f64>,
    pub ccc_d: Option<f64>,
    pub ccc_mean: Option<f64>,
    pub accuracy: Option<f64>,
    pub macro_recall: Option<f64>,
    pub macro_f1: Option<f64>,
    pub confusion: Option<Vec<Vec<u64>>>,
    pub n_eval: usize,
}

impl EvalReport {
    /// Mean of accuracy and mean CCC when both exist, otherwise whichever does.
    pub fn validation_score(&self) -> Option<f64> {
        validation_score(self.accuracy, self.ccc_mean)
    }
}

pub fn validation_score(accuracy: Option<f64>, ccc_mean: Option<f64>) -> Option<f64> {
    match (accuracy, ccc_mean) {
        (Some(a), Some(c)) => Some(0.5 * (a + c)),
        (a, c) => a.or(c),
    }
}

/// Scores continuous predictions `[v, a, d]` against truth over a full split.
pub fn score_continuous(pred: &[[f64; NUM_ATTRIBUTES]], truth: &[[f64; NUM_ATTRIBUTES]]) -> Result<[f64; NUM_ATTRIBUTES]> {
    let mut out = [0.0; NUM_ATTRIBUTES];
    for (j, o) in out.iter_mut().enumerate() {
        let p: Vec<f64> = pred.iter().map(|r| r[j]).collect();
        let t: Vec<f64> = truth.iter().map(|r| r[j]).collect();
        *o = ccc(&p, &t)?.value;
    }
    Ok(out)
}

/// Builds a report from collected predictions. `disc` pairs are
/// `(pred, truth)` class ids, `cont` pairs are `(pred, truth)` triples.
pub fn report(disc: &[(usize, usize)], cont: &[([f64; 3], [f64; 3])], n_eval: usize) -> Result<EvalReport> {
    let mut r = EvalReport {
        n_eval,
        ..Default::default()
    };
    if !disc.is_empty() {
        let (p, t): (Vec<usize>, Vec<usize>) = disc.iter().copied().unzip();
        r.accuracy = Some(accuracy(&p, &t)?);
        r.macro_recall = Some(macro_recall(&p, &t, NUM_CLASSES)?);
        r.macro_f1 = Some(macro_f1(&p, &t, NUM_CLASSES)?);
        r.confusion = Some(confusion(&p, &t, NUM_CLASSES)?);
    }
    if cont.len() >= 2 {
        let (p, t): (Vec<[f64; 3]>, Vec<[f64; 3]>) = cont.iter().copied().unzip();
        let [v, a, d] = score_continuous(&p, &t)?;
        r.ccc_v = Some(v);
        r.ccc_a = Some(a);
        r.ccc_d = Some(d);
        r.ccc_mean = Some((v + a + d) / 3.0);
    }
    Ok(r)
}

/// Runs eval-mode inference over `examples` and scores each head against the
/// examples carrying its label type. CCC is computed over the whole split.
pub fn evaluate(model: &mut Model<f32>, examples: &[Example], batch_size: usize) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut disc = Vec::new();
    let mut cont = Vec::new();
    for chunk in examples.chunks(batch_size) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = Batch::from_examples(&refs, 0)?;
        let pred = model.predict(&batch)?;
        for (i, ex) in chunk.iter().enumerate() {
            if let (Some(classes), Some(t)) = (&pred.classes, ex.label.disc) {
                disc.push((classes[i], t));
            }
            if let (Some(c_hat), Some(t)) = (&pred.c_hat, ex.label.vad) {
                let row = c_hat.row(i);
                cont.push((
                    [row[0] as f64, row[1] as f64, row[2] as f64],
                    [t[0] as f64, t[1] as f64, t[2] as f64],
                ));
            }
        }
    }
    report(&disc, &cont, examples.len())
}
