//! Top-K ranking and the NDCG, MRR and novelty metrics.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::{GfcfModel, SplitDataset, TrainedModel};
use crate::error::{Error, Result};
use crate::par;
use crate::solver::HybridScorer;
use crate::sparse::{degree_power, DenseMatrix, InteractionMatrix};

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];

#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub user: usize,
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
    /// Fewer than K candidates were available.
    pub truncated: bool,
}

fn by_score_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Top `k` non-excluded items by descending score, ties by ascending index.
pub fn rank_topk(user: usize, scores: &[f64], exclude: &[usize], k: usize) -> Result<RankedList> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let mut excluded = vec![false; scores.len()];
    for &i in exclude {
        if i >= scores.len() {
            return Err(Error::IndexOutOfRange {
                what: "excluded item",
                index: i,
                len: scores.len(),
            });
        }
        excluded[i] = true;
    }
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|&i| !excluded[i]).collect();
    let cmp = by_score_then_index(scores);
    let truncated = candidates.len() < k;
    if !truncated && candidates.len() > k {
        candidates.select_nth_unstable_by(k - 1, &cmp);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(&cmp);
    Ok(RankedList {
        user,
        scores: candidates.iter().map(|&i| scores[i]).collect(),
        items: candidates,
        truncated,
    })
}

/// `relevant` must be sorted ascending.
fn is_relevant(relevant: &[usize], item: usize) -> bool {
    relevant.binary_search(&item).is_ok()
}

/// NDCG over the first `k` positions with binary gains.
pub fn ndcg_at_k(ranked: &RankedList, relevant: &[usize], k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let dcg: f64 = ranked
        .items
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &i)| is_relevant(relevant, i))
        .map(|(p, _)| 1.0 / ((p + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..relevant.len().min(k)).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
    dcg / idcg
}

/// Reciprocal position of the first relevant item in the top `k`, else 0.
pub fn mrr_at_k(ranked: &RankedList, relevant: &[usize], k: usize) -> f64 {
    ranked
        .items
        .iter()
        .take(k)
        .position(|&i| is_relevant(relevant, i))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

/// Mean novelty `-log2(d_i / |U|) / log2 |U|` over one list's first `k`
/// positions, and how many of them had training degree 0 (scored as 1).
pub fn list_novelty(ranked: &RankedList, item_degrees: &[usize], n_users: usize, k: usize) -> (f64, usize) {
    let shown = ranked.items.len().min(k);
    if shown == 0 || n_users <= 1 {
        return (0.0, 0);
    }
    let log_u = (n_users as f64).log2();
    let mut zero = 0;
    let mut sum = 0.0;
    for &i in &ranked.items[..shown] {
        let d = match item_degrees[i] {
            0 => {
                zero += 1;
                1
            }
            d => d,
        };
        sum -= (d as f64 / n_users as f64).log2() / log_u;
    }
    (sum / shown as f64, zero)
}

/// Nov@K averaged over users and list positions.
pub fn novelty_at_k(lists: &[RankedList], item_degrees: &[usize], n_users: usize, k: usize) -> f64 {
    if lists.is_empty() {
        return 0.0;
    }
    lists
        .iter()
        .map(|l| list_novelty(l, item_degrees, n_users, k).0)
        .sum::<f64>()
        / lists.len() as f64
}

// ---------------------------------------------------------------------------
// Scorers
// ---------------------------------------------------------------------------

/// Anything that scores every item for one user from their training items.
pub trait Scorer: Sync {
    fn n_items(&self) -> usize;
    fn score_user(&self, user: usize, train_items: &[u32], out: &mut [f64]);
}

/// Item popularity from training degrees.
#[derive(Debug, Clone)]
pub struct PopularityScorer {
    pub degrees: Vec<f64>,
}

impl PopularityScorer {
    pub fn new(train: &InteractionMatrix) -> Self {
        PopularityScorer {
            degrees: train.item_degrees().iter().map(|&d| d as f64).collect(),
        }
    }
}

impl Scorer for PopularityScorer {
    fn n_items(&self) -> usize {
        self.degrees.len()
    }
    fn score_user(&self, _: usize, _: &[u32], out: &mut [f64]) {
        out.copy_from_slice(&self.degrees);
    }
}

/// Precomputed users x items scores.
#[derive(Debug, Clone)]
pub struct DenseScorer(pub DenseMatrix);

impl Scorer for DenseScorer {
    fn n_items(&self) -> usize {
        self.0.n_cols()
    }
    fn score_user(&self, user: usize, _: &[u32], out: &mut [f64]) {
        out.copy_from_slice(self.0.row(user));
    }
}

/// A trained model prepared for repeated per-user scoring.
pub struct ModelScorer<'a> {
    model: &'a TrainedModel,
    hybrid: Option<HybridScorer>,
    gfcf: Option<(Vec<f64>, Vec<f64>)>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a TrainedModel) -> Self {
        let gfcf_scaling = |m: &GfcfModel| {
            (
                degree_power(&m.filter.item_degrees, -0.5),
                degree_power(&m.filter.item_degrees, 0.5),
            )
        };
        match model {
            TrainedModel::Ease(_) => ModelScorer {
                model,
                hybrid: None,
                gfcf: None,
            },
            TrainedModel::Gfcf(m) => ModelScorer {
                model,
                hybrid: None,
                gfcf: Some(gfcf_scaling(m)),
            },
            TrainedModel::Corml(m) => ModelScorer {
                model,
                hybrid: Some(m.scorer()),
                gfcf: None,
            },
        }
    }
}

impl Scorer for ModelScorer<'_> {
    fn n_items(&self) -> usize {
        self.model.n_items()
    }

    fn score_user(&self, _: usize, items: &[u32], out: &mut [f64]) {
        match self.model {
            TrainedModel::Ease(m) => {
                out.fill(0.0);
                for &a in items {
                    for (o, c) in out.iter_mut().zip(m.weights.row(a as usize)) {
                        *o += c;
                    }
                }
            }
            TrainedModel::Gfcf(m) => {
                let (down, up) = self.gfcf.as_ref().expect("set for graph filter models");
                let v = &m.filter.v;
                let mut z = vec![0.0; v.n_cols()];
                for &a in items {
                    let a = a as usize;
                    for (zk, vk) in z.iter_mut().zip(v.row(a)) {
                        *zk += down[a] * vk;
                    }
                }
                for (j, o) in out.iter_mut().enumerate() {
                    *o = v.row(j).iter().zip(&z).map(|(x, y)| x * y).sum::<f64>() * up[j];
                }
            }
            TrainedModel::Corml(m) => {
                let scorer = self.hybrid.as_ref().expect("set for CoRML models");
                scorer.score_into(items, &m.h, &m.g, out);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Rank against the validation set, excluding train items.
    Valid,
    /// Rank against the test set, excluding train (and by default valid) items.
    Test,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(EvalMode::Valid),
            "test" => Ok(EvalMode::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown eval mode '{other}' (expected valid|test)"
            ))),
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::Valid => "valid",
            EvalMode::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub mode: EvalMode,
    /// In test mode, drop validation items from the candidates.
    pub exclude_valid: bool,
    pub per_user: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ks: DEFAULT_KS.to_vec(),
            mode: EvalMode::Test,
            exclude_valid: true,
            per_user: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsAtK {
    pub k: usize,
    pub ndcg: f64,
    pub mrr: f64,
    pub novelty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: usize,
    /// One entry per cutoff, in the order of the report's `ks`.
    pub ndcg: Vec<f64>,
    pub mrr: Vec<f64>,
    pub novelty: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub ks: Vec<usize>,
    pub metrics: Vec<MetricsAtK>,
    pub users_evaluated: usize,
    pub users_skipped: usize,
    pub truncated_lists: usize,
    /// Recommended slots (at the largest K) filled by items without training interactions.
    pub zero_degree_recommendations: usize,
    /// Echo of the run configuration, in insertion order.
    pub config: Vec<(String, String)>,
    pub per_user: Option<Vec<UserMetrics>>,
}

impl EvalReport {
    pub fn metric(&self, k: usize) -> Option<&MetricsAtK> {
        self.metrics.iter().find(|m| m.k == k)
    }

    /// `key<TAB>value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k}\t{v}");
        }
        let _ = writeln!(s, "mode\t{}", self.mode);
        let _ = writeln!(s, "users_evaluated\t{}", self.users_evaluated);
        let _ = writeln!(s, "users_skipped\t{}", self.users_skipped);
        let _ = writeln!(s, "truncated_lists\t{}", self.truncated_lists);
        let _ = writeln!(s, "zero_degree_recommendations\t{}", self.zero_degree_recommendations);
        for m in &self.metrics {
            let _ = writeln!(s, "ndcg@{}\t{}", m.k, m.ndcg);
            let _ = writeln!(s, "mrr@{}\t{}", m.k, m.mrr);
            let _ = writeln!(s, "novelty@{}\t{}", m.k, m.novelty);
        }
        s
    }

    pub fn to_json(&self) -> String {
        let config: serde_json::Map<String, serde_json::Value> = self
            .config
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
            .collect();
        let mut doc = serde_json::to_value(self).expect("report serializes");
        doc["config"] = serde_json::Value::Object(config);
        if self.per_user.is_none() {
            doc.as_object_mut().expect("object").remove("per_user");
        }
        let mut out = serde_json::to_string_pretty(&doc).expect("report serializes");
        out.push('\n');
        out
    }
}

/// Aligned comparison table of several reports (one row per model).
pub fn comparison_table(rows: &[(String, &EvalReport)]) -> String {
    let Some((_, first)) = rows.first() else {
        return String::new();
    };
    let mut header = vec!["model".to_string()];
    for k in &first.ks {
        header.extend([format!("ndcg@{k}"), format!("mrr@{k}"), format!("nov@{k}")]);
    }
    let mut table = vec![header];
    for (name, rep) in rows {
        let mut row = vec![name.clone()];
        for m in &rep.metrics {
            row.extend([
                format!("{:.6}", m.ndcg),
                format!("{:.6}", m.mrr),
                format!("{:.6}", m.novelty),
            ]);
        }
        table.push(row);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r.get(c).map_or(0, String::len)).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for row in table {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| format!("{v:<width$}", width = widths[c]))
            .collect();
        let _ = writeln!(s, "{}", cells.join("  ").trim_end());
    }
    s
}

/// Rank every user with a nonempty relevance set and aggregate the metrics.
pub fn evaluate<S: Scorer>(model: &S, split: &SplitDataset, options: &EvalOptions) -> Result<EvalReport> {
    let n_items = split.n_items();
    if model.n_items() != n_items {
        return Err(Error::DimensionMismatch {
            context: "evaluate model item count",
            expected: n_items,
            found: model.n_items(),
        });
    }
    let mut ks = options.ks.clone();
    ks.sort_unstable();
    ks.dedup();
    let Some(&k_max) = ks.last() else {
        return Err(Error::InvalidArgument("at least one cutoff K is required".into()));
    };
    if ks[0] == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let relevance = match options.mode {
        EvalMode::Valid => &split.valid,
        EvalMode::Test => &split.test,
    };
    let n_users = split.n_users();
    let degrees = split.train.item_degrees();

    let per_user = par::map_indices(n_users, |u| {
        let relevant: Vec<usize> = relevance.row(u).iter().map(|&i| i as usize).collect();
        if relevant.is_empty() {
            return None;
        }
        let train = split.train.row(u);
        let mut exclude: Vec<usize> = train.iter().map(|&i| i as usize).collect();
        if options.mode == EvalMode::Test && options.exclude_valid {
            exclude.extend(split.valid.row(u).iter().map(|&i| i as usize));
        }
        let mut scores = vec![0.0; n_items];
        model.score_user(u, train, &mut scores);
        let list = rank_topk(u, &scores, &exclude, k_max).expect("K validated");
        let mut m = UserMetrics {
            user: u,
            ndcg: Vec::with_capacity(ks.len()),
            mrr: Vec::with_capacity(ks.len()),
            novelty: Vec::with_capacity(ks.len()),
        };
        for &k in &ks {
            m.ndcg.push(ndcg_at_k(&list, &relevant, k));
            m.mrr.push(mrr_at_k(&list, &relevant, k));
            m.novelty.push(list_novelty(&list, degrees, n_users, k).0);
        }
        let zero = list_novelty(&list, degrees, n_users, k_max).1;
        Some((m, list.truncated, zero))
    });

    let evaluated: Vec<_> = per_user.into_iter().flatten().collect();
    let count = evaluated.len();
    let mean = |f: &dyn Fn(&UserMetrics) -> f64| {
        if count == 0 {
            0.0
        } else {
            evaluated.iter().map(|(m, _, _)| f(m)).sum::<f64>() / count as f64
        }
    };
    let metrics = ks
        .iter()
        .enumerate()
        .map(|(c, &k)| MetricsAtK {
            k,
            ndcg: mean(&|m| m.ndcg[c]),
            mrr: mean(&|m| m.mrr[c]),
            novelty: mean(&|m| m.novelty[c]),
        })
        .collect();
    Ok(EvalReport {
        mode: options.mode,
        ks: ks.clone(),
        metrics,
        users_evaluated: count,
        users_skipped: n_users - count,
        truncated_lists: evaluated.iter().filter(|(_, t, _)| *t).count(),
        zero_degree_recommendations: evaluated.iter().map(|(_, _, z)| z).sum(),
        config: Vec::new(),
        per_user: options
            .per_user
            .then(|| evaluated.into_iter().map(|(m, _, _)| m).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{IdIndex, SplitConfig};

    fn list(items: Vec<usize>) -> RankedList {
        RankedList {
            user: 0,
            scores: vec![0.0; items.len()],
            items,
            truncated: false,
        }
    }

    #[test]
    fn rank_topk_examples() {
        assert_eq!(rank_topk(0, &[3.0, 1.0, 2.0], &[], 2).unwrap().items, vec![0, 2]);
        assert_eq!(rank_topk(0, &[3.0, 1.0, 2.0], &[0], 2).unwrap().items, vec![2, 1]);
        assert_eq!(rank_topk(0, &[1.0; 6], &[], 4).unwrap().items, vec![0, 1, 2, 3]);
        let short = rank_topk(0, &[1.0, 2.0, 3.0], &[1], 5).unwrap();
        assert!(short.truncated);
        assert_eq!(short.items, vec![2, 0]);
        assert_eq!(short.scores, vec![3.0, 1.0]);
        assert!(rank_topk(0, &[1.0], &[], 0).is_err());
    }

    #[test]
    fn metric_examples() {
        assert_eq!(ndcg_at_k(&list(vec![1, 2, 3]), &[1, 2, 3, 4], 3), 1.0);
        assert_eq!(ndcg_at_k(&list(vec![1, 2]), &[5], 2), 0.0);
        assert_eq!(ndcg_at_k(&list(vec![0, 7]), &[7], 2), 1.0 / 3f64.log2());
        assert!((ndcg_at_k(&list(vec![0, 7]), &[7], 2) - 0.6309).abs() < 1e-4);
        assert_eq!(mrr_at_k(&list(vec![4, 1]), &[4], 2), 1.0);
        assert_eq!(mrr_at_k(&list(vec![4, 1]), &[9], 2), 0.0);
        assert_eq!(mrr_at_k(&list(vec![4, 1, 3, 0, 2]), &[3], 5), 1.0 / 3.0);
    }

    #[test]
    fn novelty_examples() {
        let degrees = vec![1, 1024, 16];
        assert_eq!(novelty_at_k(&[list(vec![0])], &degrees, 1024, 1), 1.0);
        assert_eq!(novelty_at_k(&[list(vec![1])], &degrees, 1024, 1), 0.0);
        assert_eq!(novelty_at_k(&[list(vec![0, 2])], &[1, 0, 16], 16, 2), 0.5);
        let (v, zero) = list_novelty(&list(vec![1]), &[1, 0], 16, 1);
        assert_eq!((v, zero), (1.0, 1));
    }

    #[test]
    fn monotone_transform_keeps_metrics() {
        let scores = [0.3, -1.0, 2.5, 0.7, 0.0, 1.1];
        let moved: Vec<f64> = scores.iter().map(|x| 2.0 * x + 1.0).collect();
        let a = rank_topk(0, &scores, &[3], 4).unwrap();
        let b = rank_topk(0, &moved, &[3], 4).unwrap();
        assert_eq!(a.items, b.items);
        let rel = [0, 4];
        assert_eq!(ndcg_at_k(&a, &rel, 4), ndcg_at_k(&b, &rel, 4));
        assert_eq!(mrr_at_k(&a, &rel, 4), mrr_at_k(&b, &rel, 4));
    }

    fn small_split() -> SplitDataset {
        let train = InteractionMatrix::from_pairs(3, 5, [(0, 0), (1, 1), (2, 2), (2, 0)]).unwrap();
        let valid = InteractionMatrix::from_pairs(3, 5, [(0, 1), (1, 0)]).unwrap();
        let test = InteractionMatrix::from_pairs(3, 5, [(0, 3), (0, 4), (1, 2)]).unwrap();
        SplitDataset {
            train,
            valid,
            test,
            index: IdIndex::default(),
            config: SplitConfig::default(),
        }
    }

    #[test]
    fn perfect_oracle_scores_one() {
        let split = small_split();
        let oracle = DenseScorer(split.test.to_dense());
        let opts = EvalOptions {
            ks: vec![1, 2],
            per_user: true,
            ..Default::default()
        };
        let report = evaluate(&oracle, &split, &opts).unwrap();
        assert_eq!(report.users_evaluated, 2);
        assert_eq!(report.users_skipped, 1);
        for m in &report.metrics {
            assert_eq!(m.ndcg, 1.0);
            assert_eq!(m.mrr, 1.0);
        }
        let per_user = report.per_user.as_ref().unwrap();
        let mean: f64 = per_user.iter().map(|m| m.novelty[1]).sum::<f64>() / 2.0;
        assert!((mean - report.metrics[1].novelty).abs() < 1e-12);
        assert!(report.to_text().contains("ndcg@2\t1\n"));
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(json["metrics"][0]["k"], 1);
    }

    #[test]
    fn valid_exclusion_flag() {
        let split = small_split();
        // user 0 prefers their valid item 1 above everything
        let scores =
            DenseScorer(DenseMatrix::from_rows(&[vec![0.0, 9.0, 0.0, 1.0, 0.5], vec![0.0; 5], vec![0.0; 5]]).unwrap());
        let mut opts = EvalOptions {
            ks: vec![1],
            ..Default::default()
        };
        let excluded = evaluate(&scores, &split, &opts).unwrap();
        opts.exclude_valid = false;
        let kept = evaluate(&scores, &split, &opts).unwrap();
        assert!(excluded.metrics[0].mrr > kept.metrics[0].mrr);
    }

    #[test]
    fn full_cutoff_with_full_relevance() {
        let train = InteractionMatrix::from_pairs(1, 4, [(0, 0)]).unwrap();
        let test = InteractionMatrix::from_pairs(1, 4, [(0, 1), (0, 2), (0, 3)]).unwrap();
        let split = SplitDataset {
            valid: InteractionMatrix::from_pairs(1, 4, []).unwrap(),
            train,
            test,
            index: IdIndex::default(),
            config: SplitConfig::default(),
        };
        let report = evaluate(
            &PopularityScorer { degrees: vec![0.0; 4] },
            &split,
            &EvalOptions {
                ks: vec![4],
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(report.metrics[0].ndcg, 1.0);
        assert_eq!(report.truncated_lists, 1);
    }
}
