//! Stratified train/val/test splits and k-fold plans.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    /// 80/20 train/test, then 80/20 train/val inside the training share.
    pub const NESTED_80_20: SplitFractions = SplitFractions {
        train: 0.64,
        val: 0.16,
        test: 0.20,
    };

    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f <= 0.0) {
            return Err(Error::Config(format!("split fractions must be positive, got {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must sum to 1, got {parts:?}")));
        }
        Ok(())
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self::NESTED_80_20
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub seed: u64,
    pub stratified: bool,
}

impl SplitPlan {
    /// Training and validation indices together, sorted.
    pub fn development_indices(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.train_indices.iter().chain(&self.val_indices).copied().collect();
        all.sort_unstable();
        all
    }

    /// True when the three index lists partition `0..n`.
    pub fn partitions(&self, n: usize) -> bool {
        let mut all: Vec<usize> = self
            .train_indices
            .iter()
            .chain(&self.val_indices)
            .chain(&self.test_indices)
            .copied()
            .collect();
        all.sort_unstable();
        all.len() == n && all.iter().enumerate().all(|(i, &v)| i == v)
    }
}

/// Round `n * fraction` for each partition so the sizes sum to `n` exactly.
fn partition_sizes(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let test = (n as f64 * fractions[2]).round() as usize;
    let val = ((n as f64 * fractions[1]).round() as usize).min(n - test);
    [n - test - val, val, test]
}

/// Round a real matrix with integral row and column sums to integers such
/// that every entry is its floor or ceiling and all sums are preserved.
/// Solved as a unit-capacity flow from rows to columns.
fn controlled_rounding(targets: &[Vec<f64>], row_sums: &[usize], col_sums: &[usize]) -> Option<Vec<Vec<usize>>> {
    let rows = targets.len();
    let cols = col_sums.len();
    let mut out: Vec<Vec<usize>> = targets
        .iter()
        .map(|r| r.iter().map(|v| (v + 1e-9).floor() as usize).collect())
        .collect();
    let mut row_need: Vec<usize> = (0..rows)
        .map(|r| row_sums[r].checked_sub(out[r].iter().sum()))
        .collect::<Option<_>>()?;
    let mut col_need: Vec<usize> = (0..cols)
        .map(|c| col_sums[c].checked_sub(out.iter().map(|r| r[c]).sum()))
        .collect::<Option<_>>()?;
    // Cells that may still receive +1 (fractional part present).
    let mut open: Vec<Vec<bool>> = targets
        .iter()
        .zip(&out)
        .map(|(t, o)| t.iter().zip(o).map(|(v, &f)| *v - f as f64 > 1e-9).collect())
        .collect();

    // Augmenting paths over the bipartite residual graph.
    while let Some(start) = (0..rows).find(|&r| row_need[r] > 0) {
        // BFS from row `start` to any column with remaining need.
        // Node ids: rows 0..rows, columns rows..rows+cols.
        let mut prev: Vec<Option<usize>> = vec![None; rows + cols];
        let mut visited = vec![false; rows + cols];
        visited[start] = true;
        let mut queue = std::collections::VecDeque::from([start]);
        let mut sink = None;
        while let Some(node) = queue.pop_front() {
            if node < rows {
                for c in 0..cols {
                    let id = rows + c;
                    if open[node][c] && !visited[id] {
                        visited[id] = true;
                        prev[id] = Some(node);
                        if col_need[c] > 0 {
                            sink = Some(id);
                            break;
                        }
                        queue.push_back(id);
                    }
                }
                if sink.is_some() {
                    break;
                }
            } else {
                let c = node - rows;
                // Backward edge: undo an increment already placed in this column.
                for r in 0..rows {
                    let base = (targets[r][c] + 1e-9).floor() as usize;
                    if out[r][c] > base && !visited[r] {
                        visited[r] = true;
                        prev[r] = Some(node);
                        queue.push_back(r);
                    }
                }
            }
        }
        let mut node = sink?;
        col_need[node - rows] -= 1;
        while let Some(p) = prev[node] {
            if p < rows {
                let c = node - rows;
                out[p][c] += 1;
                open[p][c] = false;
            } else {
                let c = p - rows;
                out[node][c] -= 1;
                open[node][c] = true;
            }
            node = p;
        }
        row_need[start] -= 1;
    }
    col_need.iter().all(|&c| c == 0).then_some(out)
}

/// Split `labels` into train/val/test, preserving each class's proportion in
/// every partition to within one sample.
pub fn stratified_split(class_count: usize, labels: &[usize], fractions: SplitFractions, seed: u64) -> Result<SplitPlan> {
    fractions.validate()?;
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        members
            .get_mut(l)
            .ok_or(Error::Label {
                label: l,
                classes: class_count,
            })?
            .push(i);
    }
    for (c, m) in members.iter().enumerate() {
        if !m.is_empty() && m.len() < 3 {
            return Err(Error::Infeasible(format!(
                "class {c} has {} sample(s) but 3 partitions each need at least one",
                m.len()
            )));
        }
    }

    let fr = [fractions.train, fractions.val, fractions.test];
    let sizes = partition_sizes(n, &fr);
    let targets: Vec<Vec<f64>> = members
        .iter()
        .map(|m| sizes.iter().map(|&s| m.len() as f64 * s as f64 / n as f64).collect())
        .collect();
    let row_sums: Vec<usize> = members.iter().map(Vec::len).collect();
    let alloc = controlled_rounding(&targets, &row_sums, &sizes)
        .ok_or_else(|| Error::Infeasible("no consistent per-class allocation".into()))?;

    let mut plan = SplitPlan {
        train_indices: Vec::new(),
        val_indices: Vec::new(),
        test_indices: Vec::new(),
        seed,
        stratified: true,
    };
    for (c, mut m) in members.into_iter().enumerate() {
        m.shuffle(&mut rng_from(derive_seed(seed, c as u64)));
        let (t, v) = (alloc[c][2], alloc[c][1]);
        plan.test_indices.extend_from_slice(&m[..t]);
        plan.val_indices.extend_from_slice(&m[t..t + v]);
        plan.train_indices.extend_from_slice(&m[t + v..]);
    }
    plan.train_indices.sort_unstable();
    plan.val_indices.sort_unstable();
    plan.test_indices.sort_unstable();
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub folds: Vec<Fold>,
}

/// Stratified k-fold assignment of `indices` (which index into `labels`).
/// Each class is dealt round-robin across folds, continuing where the
/// previous class stopped, so per-class and total fold sizes differ by at
/// most one.
pub fn make_folds(indices: &[usize], labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    let class_count = indices.iter().map(|&i| labels[i] + 1).max().ok_or(Error::EmptyDataset)?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for &i in indices {
        members[labels[i]].push(i);
    }
    if let Some((c, m)) = members.iter().enumerate().find(|(_, m)| !m.is_empty() && m.len() < k) {
        return Err(Error::Infeasible(format!(
            "class {c} has {} sample(s), fewer than k={k}",
            m.len()
        )));
    }

    let mut val_sets: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut cursor = 0;
    for (c, mut m) in members.into_iter().enumerate() {
        m.sort_unstable();
        m.shuffle(&mut rng_from(derive_seed(seed, c as u64)));
        for idx in m {
            val_sets[cursor % k].push(idx);
            cursor += 1;
        }
    }

    let folds = val_sets
        .into_iter()
        .map(|mut val| {
            val.sort_unstable();
            let mut train: Vec<usize> = indices.iter().copied().filter(|i| val.binary_search(i).is_err()).collect();
            train.sort_unstable();
            Fold {
                train_indices: train,
                val_indices: val,
            }
        })
        .collect();
    Ok(FoldPlan { k, folds })
}
