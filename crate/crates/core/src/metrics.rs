//! SI-SDR, NMSE in dB and dataset-level aggregation of evaluation rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Residual energy below this fraction of the target energy counts as a perfect estimate.
pub const PERFECT_RESIDUAL: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiSdrResult {
    /// dB; `+∞` for a perfect estimate, `−∞` for a silent or orthogonal one.
    pub value: f64,
    /// Optimal scaling of the reference.
    pub alpha: f64,
}

/// Neumaier-compensated sum; plain summation leaves enough error in α that
/// a scaled copy of the reference misses the perfect-estimate threshold.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    compensated_sum(a.iter().zip(b).map(|(x, y)| x * y))
}

pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<SiSdrResult> {
    if reference.len() != estimate.len() || reference.is_empty() {
        return Err(Error::Shape(format!(
            "reference has {} samples, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    let ref_energy = dot(reference, reference);
    if ref_energy == 0.0 {
        return Err(Error::UndefinedReference);
    }
    let alpha = dot(estimate, reference) / ref_energy;
    let target: f64 = alpha * alpha * ref_energy;
    let residual = compensated_sum(reference.iter().zip(estimate).map(|(s, e)| {
        let d = alpha * s - e;
        d * d
    }));
    let value = if target == 0.0 {
        f64::NEG_INFINITY
    } else if residual < PERFECT_RESIDUAL * target {
        f64::INFINITY
    } else {
        10.0 * (target / residual).log10()
    };
    Ok(SiSdrResult { value, alpha })
}

/// `10·log10(ε)`; `ε = 0` maps to `−∞`.
pub fn nmse_db(eps: f64) -> Result<f64> {
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::Domain(format!("NMSE must be non-negative, got {eps}")));
    }
    Ok(if eps == 0.0 { f64::NEG_INFINITY } else { 10.0 * eps.log10() })
}

/// One evaluated utterance. PESQ/STOI are optional, externally supplied scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub array: String,
    pub method: String,
    pub utterance: String,
    pub noisy_si_sdr: f64,
    pub enhanced_si_sdr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy_pesq: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enhanced_pesq: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy_stoi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enhanced_stoi: Option<f64>,
}

/// Mean over the finite values; infinite or NaN values are excluded and counted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStat {
    pub mean: Option<f64>,
    pub used: usize,
    pub excluded: usize,
}

impl MeanStat {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let (mut sum, mut used, mut excluded) = (0.0, 0, 0);
        for v in values {
            if v.is_finite() {
                sum += v;
                used += 1;
            } else {
                excluded += 1;
            }
        }
        Self {
            mean: (used > 0).then(|| sum / used as f64),
            used,
            excluded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub dataset: String,
    /// `None` for dataset-level groups.
    pub array: Option<String>,
    pub method: String,
    pub rows: usize,
    pub noisy_si_sdr: MeanStat,
    pub enhanced_si_sdr: MeanStat,
    pub noisy_pesq: Option<MeanStat>,
    pub enhanced_pesq: Option<MeanStat>,
    pub noisy_stoi: Option<MeanStat>,
    pub enhanced_stoi: Option<MeanStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Per `(dataset, method)`, in first-appearance order.
    pub datasets: Vec<GroupSummary>,
    /// Per `(dataset, array, method)`, in first-appearance order.
    pub arrays: Vec<GroupSummary>,
}

fn optional(rows: &[&EvalRow], pick: impl Fn(&EvalRow) -> Option<f64>) -> Option<MeanStat> {
    let vals: Vec<f64> = rows.iter().filter_map(|r| pick(r)).collect();
    (!vals.is_empty()).then(|| MeanStat::of(vals))
}

fn summarize(dataset: &str, array: Option<&str>, method: &str, rows: &[&EvalRow]) -> GroupSummary {
    GroupSummary {
        dataset: dataset.to_string(),
        array: array.map(str::to_string),
        method: method.to_string(),
        rows: rows.len(),
        noisy_si_sdr: MeanStat::of(rows.iter().map(|r| r.noisy_si_sdr)),
        enhanced_si_sdr: MeanStat::of(rows.iter().map(|r| r.enhanced_si_sdr)),
        noisy_pesq: optional(rows, |r| r.noisy_pesq),
        enhanced_pesq: optional(rows, |r| r.enhanced_pesq),
        noisy_stoi: optional(rows, |r| r.noisy_stoi),
        enhanced_stoi: optional(rows, |r| r.enhanced_stoi),
    }
}

/// Groups rows keyed by `key`, keeping the order in which keys first appear.
fn grouped<K: Ord + Clone>(rows: &[EvalRow], key: impl Fn(&EvalRow) -> K) -> Vec<(K, Vec<&EvalRow>)> {
    let mut order: Vec<K> = Vec::new();
    let mut map: BTreeMap<K, Vec<&EvalRow>> = BTreeMap::new();
    for r in rows {
        let k = key(r);
        if !map.contains_key(&k) {
            order.push(k.clone());
        }
        map.entry(k).or_default().push(r);
    }
    order
        .into_iter()
        .map(|k| {
            let v = map.remove(&k).unwrap();
            (k, v)
        })
        .collect()
}

pub fn aggregate(rows: Vec<EvalRow>) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(Error::Validation("no evaluation rows to aggregate".into()));
    }
    let datasets = grouped(&rows, |r| (r.dataset.clone(), r.method.clone()))
        .into_iter()
        .map(|((d, m), g)| summarize(&d, None, &m, &g))
        .collect();
    let arrays = grouped(&rows, |r| (r.dataset.clone(), r.array.clone(), r.method.clone()))
        .into_iter()
        .map(|((d, a, m), g)| summarize(&d, Some(&a), &m, &g))
        .collect();
    Ok(EvalReport { rows, datasets, arrays })
}

fn cell(stat: Option<&MeanStat>, decimals: usize) -> String {
    match stat.and_then(|s| s.mean) {
        Some(v) => format!("{v:.decimals$}"),
        None => "-".into(),
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned table: one row per dataset and method, noisy and enhanced
    /// columns for SI-SDR, PESQ and STOI.
    pub fn to_table(&self) -> String {
        let header = [
            "Dataset", "Method", "SI-SDR noisy", "SI-SDR enh.", "PESQ noisy", "PESQ enh.", "STOI noisy", "STOI enh.",
        ];
        let mut lines: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for g in &self.datasets {
            lines.push(vec![
                g.dataset.clone(),
                g.method.clone(),
                cell(Some(&g.noisy_si_sdr), 1),
                cell(Some(&g.enhanced_si_sdr), 1),
                cell(g.noisy_pesq.as_ref(), 2),
                cell(g.enhanced_pesq.as_ref(), 2),
                cell(g.noisy_stoi.as_ref(), 2),
                cell(g.enhanced_stoi.as_ref(), 2),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap())
            .collect();
        let mut out = String::new();
        for (i, l) in lines.iter().enumerate() {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (v, w))| if c < 2 { format!("{v:<w$}") } else { format!("{v:>w$}") })
                .collect();
            let _ = writeln!(out, "| {} |", cells.join(" | "));
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
            }
        }
        let excluded: usize = self
            .datasets
            .iter()
            .map(|g| g.noisy_si_sdr.excluded + g.enhanced_si_sdr.excluded)
            .sum();
        if excluded > 0 {
            let _ = writeln!(out, "({excluded} non-finite SI-SDR values excluded from the means)");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn signal(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Noise orthogonal to `s` with the same energy.
    fn orthogonal_noise(s: &[f64], seed: u64) -> Vec<f64> {
        let mut n = signal(s.len(), seed);
        let k = dot(&n, s) / dot(s, s);
        n.iter_mut().zip(s).for_each(|(v, x)| *v -= k * x);
        let g = (dot(s, s) / dot(&n, &n)).sqrt();
        n.iter().map(|v| v * g).collect()
    }

    #[test]
    fn perfect_and_scaled_estimates_are_infinite() {
        let s = signal(1000, 1);
        assert_eq!(si_sdr(&s, &s).unwrap().value, f64::INFINITY);
        let scaled: Vec<f64> = s.iter().map(|v| 3.0 * v).collect();
        let r = si_sdr(&s, &scaled).unwrap();
        assert_eq!(r.value, f64::INFINITY);
        assert!((r.alpha - 3.0).abs() < 1e-12);
    }

    #[test]
    fn equal_energy_orthogonal_noise_is_zero_db() {
        let s = signal(4096, 2);
        let n = orthogonal_noise(&s, 3);
        let est: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + b).collect();
        assert!(si_sdr(&s, &est).unwrap().value.abs() < 1e-9);
    }

    #[test]
    fn scale_invariance() {
        let s = signal(2048, 4);
        let est: Vec<f64> = s.iter().zip(signal(2048, 5)).map(|(a, b)| a + 0.3 * b).collect();
        let base = si_sdr(&s, &est).unwrap().value;
        for c in [0.25, 2.0, 1024.0] {
            let e: Vec<f64> = est.iter().map(|v| v * c).collect();
            assert_eq!(si_sdr(&s, &e).unwrap().value, base);
        }
        for c in [0.37, 3.1, 1e5] {
            let e: Vec<f64> = est.iter().map(|v| v * c).collect();
            assert!((si_sdr(&s, &e).unwrap().value - base).abs() < 1e-12);
        }
    }

    #[test]
    fn more_noise_means_lower_si_sdr() {
        let s = signal(2048, 6);
        let n = orthogonal_noise(&s, 7);
        let mut prev = f64::INFINITY;
        for g in [0.01, 0.1, 0.5, 1.0, 2.0, 10.0] {
            let est: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + g * b).collect();
            let v = si_sdr(&s, &est).unwrap().value;
            assert!(v < prev);
            assert!((v + 20.0 * f64::log10(g)).abs() < 1e-9);
            prev = v;
        }
    }

    #[test]
    fn si_sdr_errors() {
        assert!(matches!(si_sdr(&[0.0; 4], &[1.0; 4]), Err(Error::UndefinedReference)));
        assert!(matches!(si_sdr(&[1.0; 4], &[1.0; 3]), Err(Error::Shape(_))));
        assert_eq!(si_sdr(&[1.0, 2.0], &[0.0, 0.0]).unwrap().value, f64::NEG_INFINITY);
    }

    #[test]
    fn nmse_conversions() {
        assert_eq!(nmse_db(1.0).unwrap(), 0.0);
        assert!((nmse_db(0.01).unwrap() + 20.0).abs() < 1e-12);
        assert_eq!(nmse_db(0.0).unwrap(), f64::NEG_INFINITY);
        assert!(matches!(nmse_db(-0.1), Err(Error::Domain(_))));
    }

    fn row(dataset: &str, array: &str, method: &str, noisy: f64, enhanced: f64) -> EvalRow {
        EvalRow {
            dataset: dataset.into(),
            array: array.into(),
            method: method.into(),
            utterance: "u".into(),
            noisy_si_sdr: noisy,
            enhanced_si_sdr: enhanced,
            noisy_pesq: None,
            enhanced_pesq: None,
            noisy_stoi: None,
            enhanced_stoi: None,
        }
    }

    #[test]
    fn aggregation_contracts() {
        let one = aggregate(vec![row("train", "a", "oracle", -3.0, 7.0)]).unwrap();
        assert_eq!(one.datasets[0].enhanced_si_sdr.mean, Some(7.0));

        let two = aggregate(vec![row("train", "a", "m", 0.0, 0.0), row("train", "b", "m", 10.0, 0.0)]).unwrap();
        assert_eq!(two.datasets[0].noisy_si_sdr.mean, Some(5.0));
        assert_eq!(two.arrays.len(), 2);

        let inf = aggregate(vec![row("t", "a", "m", 1.0, f64::INFINITY), row("t", "a", "m", 3.0, 4.0)]).unwrap();
        let g = &inf.datasets[0];
        assert_eq!(g.enhanced_si_sdr.mean, Some(4.0));
        assert_eq!(g.enhanced_si_sdr.excluded, 1);
        assert_eq!(g.noisy_si_sdr.mean, Some(2.0));
        assert!(inf.to_table().contains("1 non-finite"));

        assert!(aggregate(Vec::new()).is_err());
    }

    #[test]
    fn report_json_and_table() {
        let mut r = row("Test Arrays", "ula_y", "proposed", -6.6, 5.4);
        r.noisy_pesq = Some(1.14);
        let rep = aggregate(vec![r, row("Training Arrays", "x", "proposed", -7.7, 3.9)]).unwrap();
        let back: EvalReport = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
        let table = rep.to_table();
        assert!(table.contains("Test Arrays"));
        assert!(table.contains("1.14"));
        let widths: Vec<usize> = table.lines().map(|l| l.chars().count()).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]));
    }
}
