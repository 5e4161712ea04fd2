//! Budgeted threshold calibration.
//!
//! A budget `B` fixes a geometric distribution of exits whose expected cost
//! is `B`; thresholds are then chosen on a held-out split so that the
//! prescribed fraction of samples leaves at each exit.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{Evaluation, ExitPolicy, ExitRecord, FlopsProfile};
use crate::error::{Error, Result};

/// `p_k ∝ q (1 - q)^(k-1)` for `q` in `(0, 1)`.
pub fn exit_fractions(q: f64, k: usize) -> Result<Vec<f64>> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::contract(format!("q must lie in (0, 1), got {q}")));
    }
    fractions_extended(q, k)
}

/// The same family continued to `q <= 0`, where `(1 - q)^(k-1)` grows with
/// `k` and pushes mass towards the last exit. Needed for budgets above the
/// cost of the uniform mixture, which `q` in `(0, 1)` cannot reach.
pub fn fractions_extended(q: f64, k: usize) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::contract(format!("need at least 2 exits, got {k}")));
    }
    if !(q < 1.0) || !q.is_finite() {
        return Err(Error::contract(format!("q must be finite and below 1, got {q}")));
    }
    Ok(softmax_ramp((1.0 - q).ln(), k))
}

/// `p_k ∝ exp(t (k - 1))`, the family in log-odds form.
fn softmax_ramp(t: f64, k: usize) -> Vec<f64> {
    let top = if t > 0.0 { t * (k - 1) as f64 } else { 0.0 };
    let w: Vec<f64> = (0..k).map(|j| (t * j as f64 - top).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn expected_cost(p: &[f64], costs: &[f64]) -> f64 {
    p.iter().zip(costs).map(|(a, b)| a * b).sum()
}

fn check_costs(costs: &[f64]) -> Result<()> {
    if costs.len() < 2 || costs.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::contract(format!("exit costs must be strictly increasing, got {costs:?}")));
    }
    Ok(())
}

/// Solve `Σ p_k(q) C_k = B`. Out-of-range budgets are an error unless
/// `clamp`, in which case they are moved to the nearest end.
pub fn solve_q(costs: &[f64], budget: f64, clamp: bool) -> Result<f64> {
    check_costs(costs)?;
    let (lo, hi) = (costs[0], costs[costs.len() - 1]);
    let b = if budget < lo || budget > hi {
        if !clamp || budget.is_nan() {
            return Err(Error::Budget { budget, min: lo, max: hi });
        }
        budget.clamp(lo, hi)
    } else {
        budget
    };
    // Expected cost increases with t = ln(1 - q); bisect on t. The lower end
    // keeps 1 - e^t representable below 1, the upper end leaves under e^-80
    // of the mass off the last exit.
    let k = costs.len();
    let cost_at = |t: f64| expected_cost(&softmax_ramp(t, k), costs);
    let (mut a, mut z) = (-36.0f64, 80.0f64);
    for _ in 0..200 {
        let m = 0.5 * (a + z);
        if cost_at(m) < b {
            a = m;
        } else {
            z = m;
        }
    }
    let t = 0.5 * (a + z);
    Ok(1.0 - t.exp())
}

/// Per-sample exit confidences and correctness on a calibration split.
#[derive(Clone, Debug)]
pub struct CalibrationSet {
    /// Enabled exits, ascending (1-based).
    pub exits: Vec<usize>,
    /// Cumulative cost of each enabled exit.
    pub costs: Vec<f64>,
    /// `confidences[i][j]`: sample `i` at exit `exits[j]`.
    pub confidences: Vec<Vec<f64>>,
    pub correct: Vec<Vec<bool>>,
}

impl CalibrationSet {
    pub fn new(exits: Vec<usize>, costs: Vec<f64>, confidences: Vec<Vec<f64>>, correct: Vec<Vec<bool>>) -> Result<Self> {
        check_costs(&costs)?;
        let k = exits.len();
        if costs.len() != k
            || confidences.len() != correct.len()
            || confidences.iter().zip(&correct).any(|(c, r)| c.len() != k || r.len() != k)
        {
            return Err(Error::contract("calibration records must all cover every enabled exit"));
        }
        Ok(CalibrationSet { exits, costs, confidences, correct })
    }

    pub fn from_records(records: &[ExitRecord], labels: &[usize], enabled: [bool; 4], profile: &FlopsProfile) -> Result<Self> {
        let exits: Vec<usize> = (1..=4).filter(|&k| enabled[k - 1]).collect();
        let costs = exits.iter().map(|&k| profile.cost(k) as f64).collect();
        let confidences = records.iter().map(|r| exits.iter().map(|&k| r.confidences[k - 1]).collect()).collect();
        let correct = records
            .iter()
            .zip(labels)
            .map(|(r, &y)| exits.iter().map(|&k| r.predictions[k - 1] == y).collect())
            .collect();
        Self::new(exits, costs, confidences, correct)
    }

    pub fn len(&self) -> usize {
        self.confidences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidences.is_empty()
    }

    pub fn num_exits(&self) -> usize {
        self.exits.len()
    }

    /// Position (into `exits`) where each sample leaves under `thresholds`.
    pub fn exit_positions(&self, thresholds: &[f64]) -> Vec<usize> {
        let k = self.num_exits();
        self.confidences
            .iter()
            .map(|c| (0..k).find(|&j| j == k - 1 || c[j] >= thresholds[j]).unwrap())
            .collect()
    }

    /// `(mean cost, accuracy, exit counts)` under `thresholds`.
    pub fn evaluate(&self, thresholds: &[f64]) -> (f64, f64, Vec<usize>) {
        let n = self.len() as f64;
        let mut counts = vec![0; self.num_exits()];
        let (mut cost, mut right) = (0.0, 0usize);
        for (i, j) in self.exit_positions(thresholds).into_iter().enumerate() {
            counts[j] += 1;
            cost += self.costs[j];
            right += usize::from(self.correct[i][j]);
        }
        (cost / n, right as f64 / n, counts)
    }

    /// Expand per-enabled-exit thresholds into a four-exit policy.
    pub fn policy(&self, thresholds: &[f64]) -> Result<ExitPolicy> {
        let mut th = [0.0; 4];
        for (j, &k) in self.exits.iter().enumerate() {
            th[k - 1] = thresholds[j];
        }
        ExitPolicy::new(th)
    }
}

/// Threshold that no confidence reaches (confidences never exceed 1).
pub const NEVER: f64 = 1.0 + f64::EPSILON;

/// Choose thresholds so that `round(p_k N)` samples leave at exit `k`, taking
/// the most confident survivors first. Ties at the threshold exit together.
pub fn thresholds_from_fractions(cal: &CalibrationSet, p: &[f64]) -> Result<Vec<f64>> {
    let k = cal.num_exits();
    if p.len() != k || p.iter().any(|&v| !(v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("p must be a distribution over {k} exits, got {p:?}")));
    }
    let n = cal.len();
    let mut th = vec![0.0; k];
    let mut alive: Vec<usize> = (0..n).collect();
    for j in 0..k - 1 {
        let target = (p[j] * n as f64).round() as usize;
        if target > alive.len() {
            break; // this and later thresholds stay 0
        }
        if target == 0 {
            th[j] = NEVER;
            continue;
        }
        let mut confs: Vec<f64> = alive.iter().map(|&i| cal.confidences[i][j]).collect();
        confs.sort_by(|a, b| b.total_cmp(a));
        th[j] = confs[target - 1];
        alive.retain(|&i| cal.confidences[i][j] < th[j]);
    }
    Ok(th)
}

/// One point of an accuracy-versus-cost curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub budget: f64,
    pub q: f64,
    /// Thresholds of all four exits (disabled exits hold 0).
    pub thresholds: [f64; 4],
    /// Evaluation split.
    pub mean_flops: f64,
    pub accuracy: f64,
    /// Calibration split.
    pub cal_mean_flops: f64,
    pub cal_accuracy: f64,
}

/// For each budget: solve `q`, derive thresholds on `cal`, then score the
/// resulting policy with `evaluate` (normally the evaluation split).
pub fn budget_sweep<F>(cal: &CalibrationSet, budgets: &[f64], mut evaluate: F) -> Result<Vec<CurveRow>>
where
    F: FnMut(&ExitPolicy) -> Result<Evaluation>,
{
    budgets
        .iter()
        .map(|&budget| {
            let q = solve_q(&cal.costs, budget, false)?;
            let p = fractions_extended(q, cal.num_exits())?;
            let th = thresholds_from_fractions(cal, &p)?;
            let policy = cal.policy(&th)?;
            let (cal_mean_flops, cal_accuracy, _) = cal.evaluate(&th);
            let ev = evaluate(&policy)?;
            Ok(CurveRow {
                budget,
                q,
                thresholds: policy.thresholds(),
                mean_flops: ev.mean_flops,
                accuracy: ev.accuracy,
                cal_mean_flops,
                cal_accuracy,
            })
        })
        .collect()
}

/// `n` budgets evenly spaced over `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![hi],
        _ => (0..n).map(|i| if i == n - 1 { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect(),
    }
}

pub const CURVE_HEADER: &str =
    "budget,q,theta_1,theta_2,theta_3,theta_4,mean_flops,accuracy,cal_mean_flops,cal_accuracy";

pub fn write_curve<W: Write>(mut w: W, rows: &[CurveRow]) -> Result<()> {
    writeln!(w, "{CURVE_HEADER}")?;
    for r in rows {
        let th: Vec<String> = r.thresholds.iter().map(f64::to_string).collect();
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.budget,
            r.q,
            th.join(","),
            r.mean_flops,
            r.accuracy,
            r.cal_mean_flops,
            r.cal_accuracy
        )?;
    }
    Ok(())
}

/// Seeded 50/50 shuffle split of `0..n` into calibration and evaluation indices.
pub fn calibration_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let eval = idx.split_off(n / 2);
    (idx, eval)
}
