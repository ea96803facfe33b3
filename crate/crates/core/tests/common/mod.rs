#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Tensor};
use prefill_core::nn::ParamStore;

pub mod grad;

/// Dense single-head attention on plain rows: softmax(q kᵀ / sqrt(d)) v.
pub fn dense_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], allowed: Option<&[bool]>) -> Vec<Vec<f64>> {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qr| {
            let s: Vec<f64> = k
                .iter()
                .enumerate()
                .map(|(j, kr)| {
                    if allowed.is_some_and(|a| !a[j]) {
                        f64::NEG_INFINITY
                    } else {
                        qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()
                    }
                })
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len()).map(|c| e.iter().zip(v).map(|(w, vr)| w / z * vr[c]).sum()).collect()
        })
        .collect()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between analytic and central
/// finite-difference gradients, per parameter tensor. At most `per_tensor`
/// evenly spaced coordinates of each tensor are probed. Tensors whose
/// probed gradients are both below `1e-10` in norm report 0.
pub fn gradient_errors<F>(store: &ParamStore, per_tensor: usize, step: f64, loss: F) -> BTreeMap<String, f64>
where
    F: Fn() -> Tensor,
{
    let grads = loss().backward().unwrap();
    let mut out = BTreeMap::new();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let p = store.get(&name).unwrap();
        let Some(g) = grads.get(p.var.as_tensor()) else {
            continue;
        };
        let analytic_all = flat(g);
        let base = store.values(&name).unwrap();
        let n = base.len();
        let stride = (n / per_tensor.max(1)).max(1);
        let idx: Vec<usize> = (0..n).step_by(stride).take(per_tensor).collect();
        let mut a = Vec::new();
        let mut num = Vec::new();
        for &i in &idx {
            let mut v = base.clone();
            v[i] = base[i] + step;
            store.set_values(&name, &v).unwrap();
            let plus = scalar(&loss());
            v[i] = base[i] - step;
            store.set_values(&name, &v).unwrap();
            let minus = scalar(&loss());
            store.set_values(&name, &base).unwrap();
            a.push(analytic_all[i]);
            num.push((plus - minus) / (2.0 * step));
        }
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff: Vec<f64> = a.iter().zip(&num).map(|(x, y)| x - y).collect();
        let scale = norm(&a).max(norm(&num));
        out.insert(name, if scale < 1e-10 { 0.0 } else { norm(&diff) / scale });
    }
    out
}

/// Pairs from a metadata CSV and report table, recomputed without the
/// library: rows grouped by patient, ordered by (date, zero-padded time,
/// study id), visits without a FINDINGS section dropped, adjacent pairs kept.
pub fn brute_force_pairs(metadata_csv: &str, reports: &HashMap<String, String>) -> Vec<(String, String, String)> {
    let mut by_patient: BTreeMap<String, Vec<(String, String, String)>> = BTreeMap::new();
    for line in metadata_csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let (pid, sid, date, time) = (cols[0], cols[1], cols[2], cols[3]);
        let has_findings = reports.get(sid).is_some_and(|r| {
            r.to_ascii_uppercase().find("FINDINGS:").is_some_and(|i| {
                let rest = &r[i + 9..];
                let end = rest.find("IMPRESSION:").unwrap_or(rest.len());
                !rest[..end].trim().is_empty()
            })
        });
        if !has_findings {
            continue;
        }
        let (int, frac) = time.split_once('.').unwrap_or((time, ""));
        let key = format!("{date}{int:0>6}.{frac:0<6}");
        by_patient.entry(pid.to_string()).or_default().push((key, sid.to_string(), pid.to_string()));
    }
    let mut pairs = Vec::new();
    for (pid, mut visits) in by_patient {
        visits.sort();
        for i in 1..visits.len() {
            pairs.push((pid.clone(), visits[i - 1].1.clone(), visits[i].1.clone()));
        }
    }
    pairs
}
