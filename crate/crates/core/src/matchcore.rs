//! Bipartite descriptor matching.
//!
//! Every solver returns a partial injection between the two keypoint sets:
//! no index on either side appears in more than one pair.

use serde::{Deserialize, Serialize};

use crate::descriptor::dot;
use crate::enrich::EnrichedKeypointSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    MutualNn,
    Exact,
    Sinkhorn,
}

impl Solver {
    pub fn name(&self) -> &'static str {
        match self {
            Solver::MutualNn => "mutual_nn",
            Solver::Exact => "exact",
            Solver::Sinkhorn => "sinkhorn",
        }
    }
}

impl std::str::FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mutual_nn" | "mnn" => Ok(Solver::MutualNn),
            "exact" | "hungarian" => Ok(Solver::Exact),
            "sinkhorn" => Ok(Solver::Sinkhorn),
            other => Err(Error::validation(
                "matcher",
                format!("unknown matcher {other:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub iterations: usize,
    pub dustbin_score: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 0.1,
            iterations: 100,
            dustbin_score: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatcherConfig {
    pub solver: Solver,
    pub min_score: f64,
    pub sinkhorn: SinkhornConfig,
    /// Largest `|A| * |B|` accepted by the exact solver.
    pub exact_cap: usize,
    /// Unused: ties are broken by index order.
    pub seed: u64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            solver: Solver::Exact,
            min_score: 0.2,
            sinkhorn: SinkhornConfig::default(),
            exact_cap: 2000 * 2000,
            seed: 0,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.min_score.is_finite() {
            return Err(Error::validation("min_score", "must be finite"));
        }
        if !(self.sinkhorn.epsilon.is_finite() && self.sinkhorn.epsilon > 0.0) {
            return Err(Error::validation("sinkhorn.epsilon", "must be > 0"));
        }
        if self.sinkhorn.iterations == 0 {
            return Err(Error::validation("sinkhorn.iterations", "must be >= 1"));
        }
        if !self.sinkhorn.dustbin_score.is_finite() {
            return Err(Error::validation(
                "sinkhorn.dustbin_score",
                "must be finite",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub a: usize,
    pub b: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchSet {
    pub pairs: Vec<MatchPair>,
    pub unmatched_a: Vec<usize>,
    pub unmatched_b: Vec<usize>,
}

impl MatchSet {
    fn from_pairs(mut pairs: Vec<MatchPair>, na: usize, nb: usize) -> MatchSet {
        pairs.sort_by_key(|p| (p.a, p.b));
        let mut used_a = vec![false; na];
        let mut used_b = vec![false; nb];
        for p in &pairs {
            used_a[p.a] = true;
            used_b[p.b] = true;
        }
        MatchSet {
            pairs,
            unmatched_a: (0..na).filter(|&i| !used_a[i]).collect(),
            unmatched_b: (0..nb).filter(|&j| !used_b[j]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `(a, b)` index pairs in order.
    pub fn index_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().map(|p| (p.a, p.b)).collect()
    }

    /// True when no index repeats on either side.
    pub fn is_injective(&self) -> bool {
        let mut a: Vec<usize> = self.pairs.iter().map(|p| p.a).collect();
        let mut b: Vec<usize> = self.pairs.iter().map(|p| p.b).collect();
        a.sort_unstable();
        b.sort_unstable();
        a.windows(2).all(|w| w[0] != w[1]) && b.windows(2).all(|w| w[0] != w[1])
    }

    /// Same matches with the roles of A and B swapped.
    pub fn transposed(&self) -> MatchSet {
        let mut pairs: Vec<MatchPair> = self
            .pairs
            .iter()
            .map(|p| MatchPair {
                a: p.b,
                b: p.a,
                score: p.score,
            })
            .collect();
        pairs.sort_by_key(|p| (p.a, p.b));
        MatchSet {
            pairs,
            unmatched_a: self.unmatched_b.clone(),
            unmatched_b: self.unmatched_a.clone(),
        }
    }
}

pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    Error::check_dim(a.len(), b.len())?;
    Ok(dot(a, b))
}

/// Row-major `|A| x |B|` similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn from_descriptors<A: AsRef<[f64]>, B: AsRef<[f64]>>(a: &[A], b: &[B]) -> Result<Self> {
        let mut data = Vec::with_capacity(a.len() * b.len());
        for da in a {
            for db in b {
                data.push(similarity(da.as_ref(), db.as_ref())?);
            }
        }
        let m = ScoreMatrix {
            rows: a.len(),
            cols: b.len(),
            data,
        };
        if m.data.iter().any(|v| v.is_nan()) {
            return Err(Error::validation("scores", "NaN similarity"));
        }
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        for r in rows {
            Error::check_dim(cols, r.len())?;
        }
        Ok(ScoreMatrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn transposed(&self) -> ScoreMatrix {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        ScoreMatrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

/// Index of the first maximum.
fn argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

pub fn mutual_nn_scores(s: &ScoreMatrix, cfg: &MatcherConfig) -> MatchSet {
    let mut pairs = Vec::new();
    let col_best: Vec<Option<usize>> = (0..s.cols)
        .map(|j| argmax((0..s.rows).map(|i| s.get(i, j))))
        .collect();
    for i in 0..s.rows {
        if let Some(j) = argmax((0..s.cols).map(|j| s.get(i, j))) {
            let score = s.get(i, j);
            if col_best[j] == Some(i) && score >= cfg.min_score {
                pairs.push(MatchPair { a: i, b: j, score });
            }
        }
    }
    MatchSet::from_pairs(pairs, s.rows, s.cols)
}

pub fn match_mutual_nn<A: AsRef<[f64]>, B: AsRef<[f64]>>(
    a: &[A],
    b: &[B],
    cfg: &MatcherConfig,
) -> Result<MatchSet> {
    Ok(mutual_nn_scores(&ScoreMatrix::from_descriptors(a, b)?, cfg))
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`)
/// by shortest augmenting paths with dual potentials. Returns the column of
/// each row.
fn hungarian_min(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    debug_assert!(rows <= cols);
    // 1-based arrays; index 0 is the virtual source.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if !used[j] {
                    let cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Maximum-weight partial injection. Pairs scoring below `min_score`, and
/// pairs that would not add positive weight, are never chosen.
pub fn exact_scores(s: &ScoreMatrix, cfg: &MatcherConfig) -> Result<MatchSet> {
    let size = s.rows.saturating_mul(s.cols);
    if size > cfg.exact_cap {
        return Err(Error::SizeLimit {
            size,
            cap: cfg.exact_cap,
        });
    }
    if s.rows == 0 || s.cols == 0 {
        return Ok(MatchSet::from_pairs(Vec::new(), s.rows, s.cols));
    }
    let transposed = s.rows > s.cols;
    let m = if transposed {
        s.transposed()
    } else {
        s.clone()
    };
    let weight = |v: f64| {
        if v >= cfg.min_score && v > 0.0 {
            v
        } else {
            0.0
        }
    };
    // Ineligible pairs weigh zero, so a full assignment on the weights is a
    // maximum partial injection once zero-weight pairs are dropped.
    let cost: Vec<f64> = m.data.iter().map(|&v| -weight(v)).collect();
    let assignment = hungarian_min(&cost, m.rows, m.cols);
    let mut pairs = Vec::new();
    for (i, &j) in assignment.iter().enumerate() {
        let v = m.get(i, j);
        if weight(v) > 0.0 {
            let (a, b) = if transposed { (j, i) } else { (i, j) };
            pairs.push(MatchPair { a, b, score: v });
        }
    }
    Ok(MatchSet::from_pairs(pairs, s.rows, s.cols))
}

pub fn match_exact<A: AsRef<[f64]>, B: AsRef<[f64]>>(
    a: &[A],
    b: &[B],
    cfg: &MatcherConfig,
) -> Result<MatchSet> {
    let size = a.len().saturating_mul(b.len());
    if size > cfg.exact_cap {
        return Err(Error::SizeLimit {
            size,
            cap: cfg.exact_cap,
        });
    }
    exact_scores(&ScoreMatrix::from_descriptors(a, b)?, cfg)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Log of the `(|A|+1) x (|B|+1)` transport plan with dustbins. Rows carry
/// mass 1 each and the dustbin row `|B|`; columns 1 each and the dustbin
/// column `|A|`.
pub fn sinkhorn_log_plan(s: &ScoreMatrix, cfg: &SinkhornConfig) -> Result<Vec<Vec<f64>>> {
    if s.data.iter().any(|v| v.is_nan()) {
        return Err(Error::validation("scores", "NaN similarity"));
    }
    if !(cfg.epsilon.is_finite() && cfg.epsilon > 0.0) {
        return Err(Error::validation("sinkhorn.epsilon", "must be > 0"));
    }
    let (n, m) = (s.rows, s.cols);
    let z: Vec<Vec<f64>> = (0..=n)
        .map(|i| {
            (0..=m)
                .map(|j| {
                    if i < n && j < m {
                        s.get(i, j) / cfg.epsilon
                    } else {
                        cfg.dustbin_score / cfg.epsilon
                    }
                })
                .collect()
        })
        .collect();
    let log_mu: Vec<f64> = (0..=n)
        .map(|i| if i < n { 0.0 } else { (m as f64).ln() })
        .collect();
    let log_nu: Vec<f64> = (0..=m)
        .map(|j| if j < m { 0.0 } else { (n as f64).ln() })
        .collect();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    for _ in 0..cfg.iterations {
        for i in 0..=n {
            u[i] = log_mu[i] - log_sum_exp((0..=m).map(|j| z[i][j] + v[j]));
        }
        for j in 0..=m {
            v[j] = log_nu[j] - log_sum_exp((0..=n).map(|i| z[i][j] + u[i]));
        }
    }
    Ok((0..=n)
        .map(|i| (0..=m).map(|j| z[i][j] + u[i] + v[j]).collect())
        .collect())
}

pub fn sinkhorn_scores(s: &ScoreMatrix, cfg: &MatcherConfig) -> Result<MatchSet> {
    if s.rows == 0 || s.cols == 0 {
        return Ok(MatchSet::from_pairs(Vec::new(), s.rows, s.cols));
    }
    let plan = sinkhorn_log_plan(s, &cfg.sinkhorn)?;
    let (n, m) = (s.rows, s.cols);
    let col_best: Vec<usize> = (0..m)
        .map(|j| argmax((0..=n).map(|i| plan[i][j])).expect("nonempty"))
        .collect();
    let mut pairs = Vec::new();
    for i in 0..n {
        let j = argmax(plan[i].iter().copied()).expect("nonempty");
        if j < m && col_best[j] == i && s.get(i, j) >= cfg.min_score {
            pairs.push(MatchPair {
                a: i,
                b: j,
                score: s.get(i, j),
            });
        }
    }
    Ok(MatchSet::from_pairs(pairs, n, m))
}

pub fn match_sinkhorn<A: AsRef<[f64]>, B: AsRef<[f64]>>(
    a: &[A],
    b: &[B],
    cfg: &MatcherConfig,
) -> Result<MatchSet> {
    sinkhorn_scores(&ScoreMatrix::from_descriptors(a, b)?, cfg)
}

/// Dispatches on `cfg.solver`. Empty inputs give an empty match set.
pub fn match_descriptors<A: AsRef<[f64]>, B: AsRef<[f64]>>(
    a: &[A],
    b: &[B],
    cfg: &MatcherConfig,
) -> Result<MatchSet> {
    cfg.validate()?;
    match cfg.solver {
        Solver::MutualNn => match_mutual_nn(a, b, cfg),
        Solver::Exact => match_exact(a, b, cfg),
        Solver::Sinkhorn => match_sinkhorn(a, b, cfg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// One solver pass over background and semantic keypoints together.
    Heterogeneous,
    /// Separate passes for background and semantic keypoints.
    Homogeneous,
}

impl MatchMode {
    pub fn name(&self) -> &'static str {
        match self {
            MatchMode::Heterogeneous => "heterogeneous",
            MatchMode::Homogeneous => "homogeneous",
        }
    }
}

impl std::str::FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heterogeneous" | "hetero" => Ok(MatchMode::Heterogeneous),
            "homogeneous" | "homo" => Ok(MatchMode::Homogeneous),
            other => Err(Error::validation(
                "match_mode",
                format!("unknown match mode {other:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "S")]
    Semantic,
    #[serde(rename = "B")]
    Background,
}

/// Matches two enriched frames. Pair indices refer to keypoint positions in
/// the source frames.
pub fn match_pair(
    a: &EnrichedKeypointSet,
    b: &EnrichedKeypointSet,
    mode: MatchMode,
    cfg: &MatcherConfig,
) -> Result<MatchSet> {
    if let (Some(da), Some(db)) = (a.descriptor_dim(), b.descriptor_dim()) {
        Error::check_dim(da, db)?;
    }
    if a.mode != b.mode {
        return Err(Error::validation(
            "mode",
            "frames enriched with different modes",
        ));
    }
    let na = a.background.len() + a.semantic.len();
    let nb = b.background.len() + b.semantic.len();
    let max_a = a
        .background_indices()
        .into_iter()
        .chain(a.semantic_indices())
        .max()
        .map_or(0, |m| m + 1);
    let max_b = b
        .background_indices()
        .into_iter()
        .chain(b.semantic_indices())
        .max()
        .map_or(0, |m| m + 1);
    let mut pairs = Vec::new();
    let mut lift = |set: MatchSet, ia: &[usize], ib: &[usize]| {
        pairs.extend(set.pairs.iter().map(|p| MatchPair {
            a: ia[p.a],
            b: ib[p.b],
            score: p.score,
        }));
    };
    match mode {
        MatchMode::Heterogeneous => {
            let da: Vec<_> = a
                .background_descriptors()
                .into_iter()
                .chain(a.semantic_descriptors())
                .collect();
            let db: Vec<_> = b
                .background_descriptors()
                .into_iter()
                .chain(b.semantic_descriptors())
                .collect();
            let ia: Vec<usize> = a
                .background_indices()
                .into_iter()
                .chain(a.semantic_indices())
                .collect();
            let ib: Vec<usize> = b
                .background_indices()
                .into_iter()
                .chain(b.semantic_indices())
                .collect();
            lift(match_descriptors(&da, &db, cfg)?, &ia, &ib);
        }
        MatchMode::Homogeneous => {
            let set = match_descriptors(
                &a.background_descriptors(),
                &b.background_descriptors(),
                cfg,
            )?;
            lift(set, &a.background_indices(), &b.background_indices());
            let set = match_descriptors(&a.semantic_descriptors(), &b.semantic_descriptors(), cfg)?;
            lift(set, &a.semantic_indices(), &b.semantic_indices());
        }
    }
    debug_assert!(na <= max_a && nb <= max_b);
    let mut out = MatchSet::from_pairs(pairs, max_a, max_b);
    // Only indices present in the sets count as unmatched.
    let present_a: std::collections::BTreeSet<usize> = a
        .background_indices()
        .into_iter()
        .chain(a.semantic_indices())
        .collect();
    let present_b: std::collections::BTreeSet<usize> = b
        .background_indices()
        .into_iter()
        .chain(b.semantic_indices())
        .collect();
    out.unmatched_a.retain(|i| present_a.contains(i));
    out.unmatched_b.retain(|j| present_b.contains(j));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DomainStats {
    pub ss: f64,
    pub sb: f64,
    pub bb: f64,
    pub bs: f64,
    pub total: usize,
    /// Set when there were no matches; all fractions are then zero.
    pub empty: bool,
}

/// Fractions of matches per (domain in A, domain in B) combination.
pub fn match_domain_stats(
    matches: &MatchSet,
    domains_a: &[Domain],
    domains_b: &[Domain],
) -> Result<DomainStats> {
    let mut counts = [0usize; 4];
    for p in &matches.pairs {
        let da = domains_a
            .get(p.a)
            .ok_or_else(|| Error::validation("domains_a", format!("no label for index {}", p.a)))?;
        let db = domains_b
            .get(p.b)
            .ok_or_else(|| Error::validation("domains_b", format!("no label for index {}", p.b)))?;
        let slot = match (da, db) {
            (Domain::Semantic, Domain::Semantic) => 0,
            (Domain::Semantic, Domain::Background) => 1,
            (Domain::Background, Domain::Background) => 2,
            (Domain::Background, Domain::Semantic) => 3,
        };
        counts[slot] += 1;
    }
    let total = matches.pairs.len();
    if total == 0 {
        return Ok(DomainStats {
            empty: true,
            ..DomainStats::default()
        });
    }
    let f = |c: usize| c as f64 / total as f64;
    Ok(DomainStats {
        ss: f(counts[0]),
        sb: f(counts[1]),
        bb: f(counts[2]),
        bs: f(counts[3]),
        total,
        empty: false,
    })
}

/// Domain label per frame keypoint index of an enriched set.
pub fn domains_of(set: &EnrichedKeypointSet) -> Vec<Domain> {
    let n = set
        .background_indices()
        .into_iter()
        .chain(set.semantic_indices())
        .max()
        .map_or(0, |m| m + 1);
    let mut out = vec![Domain::Background; n];
    for i in set.semantic_indices() {
        out[i] = Domain::Semantic;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub a: usize,
    pub b: usize,
    pub score: f64,
    pub domain_a: Domain,
    pub domain_b: Domain,
}

/// Serialized form of a frame-pair match result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMatches {
    pub frame_a: usize,
    pub frame_b: usize,
    pub pairs: Vec<LabeledPair>,
    pub unmatched_a: Vec<usize>,
    pub unmatched_b: Vec<usize>,
}

impl FrameMatches {
    pub fn new(
        matches: &MatchSet,
        a: &EnrichedKeypointSet,
        b: &EnrichedKeypointSet,
    ) -> FrameMatches {
        let (da, db) = (domains_of(a), domains_of(b));
        FrameMatches {
            frame_a: a.frame_index,
            frame_b: b.frame_index,
            pairs: matches
                .pairs
                .iter()
                .map(|p| LabeledPair {
                    a: p.a,
                    b: p.b,
                    score: p.score,
                    domain_a: da[p.a],
                    domain_b: db[p.b],
                })
                .collect(),
            unmatched_a: matches.unmatched_a.clone(),
            unmatched_b: matches.unmatched_b.clone(),
        }
    }
}

/// Exhaustive maximum over all partial injections; the reference for the
/// exact solver on small instances.
pub fn brute_force_best(s: &ScoreMatrix, min_score: f64) -> (f64, Vec<(usize, usize)>) {
    fn rec(
        s: &ScoreMatrix,
        min_score: f64,
        i: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<(usize, usize)>,
        acc: f64,
        best: &mut (f64, Vec<(usize, usize)>),
    ) {
        if i == s.rows {
            if acc > best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        rec(s, min_score, i + 1, used, cur, acc, best);
        for j in 0..s.cols {
            let v = s.get(i, j);
            if !used[j] && v >= min_score {
                used[j] = true;
                cur.push((i, j));
                rec(s, min_score, i + 1, used, cur, acc + v, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0.0, Vec::new());
    rec(
        s,
        min_score,
        0,
        &mut vec![false; s.cols],
        &mut Vec::new(),
        0.0,
        &mut best,
    );
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn e(dim: usize, i: usize) -> Vec<f64> {
        (0..dim).map(|k| if k == i { 1.0 } else { 0.0 }).collect()
    }

    fn random_scores(rng: &mut impl Rng, rows: usize, cols: usize) -> ScoreMatrix {
        ScoreMatrix {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        }
    }

    #[test]
    fn similarity_examples() {
        let d = [0.6, 0.8];
        assert!((similarity(&d, &d).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert!(similarity(&[1.0], &[1.0, 0.0]).unwrap_err().is_validation());
    }

    #[test]
    fn mutual_nn_examples() {
        let cfg = MatcherConfig::default();
        let ident: Vec<Vec<f64>> = (0..4).map(|i| e(4, i)).collect();
        let m = match_mutual_nn(&ident, &ident, &cfg).unwrap();
        assert_eq!(m.index_pairs(), vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        let m = match_mutual_nn(&[e(2, 0), e(2, 1)], &[e(2, 1), e(2, 0)], &cfg).unwrap();
        assert_eq!(m.index_pairs(), vec![(0, 1), (1, 0)]);
        let far = [vec![1.0, 0.0, 0.0]];
        let m = match_mutual_nn(&far, &[vec![0.1, 0.995, 0.0]], &cfg).unwrap();
        assert!(m.is_empty());
        assert_eq!(m.unmatched_a, vec![0]);
    }

    #[test]
    fn mutual_nn_ties_pick_lowest_index() {
        let a = [vec![1.0, 0.0]];
        let b = [vec![1.0, 0.0], vec![1.0, 0.0]];
        let m = match_mutual_nn(&a, &b, &MatcherConfig::default()).unwrap();
        assert_eq!(m.index_pairs(), vec![(0, 0)]);
    }

    #[test]
    fn exact_small_cases() {
        let cfg = MatcherConfig::default();
        let m = match_exact(&[e(2, 0)], &[e(2, 0)], &cfg).unwrap();
        assert_eq!(m.index_pairs(), vec![(0, 0)]);
        let m = match_exact(&[e(2, 0)], &[e(2, 1)], &cfg).unwrap();
        assert!(m.is_empty());
        let small = MatcherConfig {
            exact_cap: 3,
            ..cfg
        };
        assert!(matches!(
            match_exact(&[e(2, 0), e(2, 1)], &[e(2, 0), e(2, 1)], &small),
            Err(Error::SizeLimit { size: 4, cap: 3 })
        ));
    }

    #[test]
    fn exact_three_by_three_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_scores(&mut rng, 3, 3);
        let cfg = MatcherConfig::default();
        let got = exact_scores(&s, &cfg).unwrap();
        let (_, want) = brute_force_best(&s, cfg.min_score);
        assert_eq!(got.index_pairs(), want);
    }

    #[test]
    fn brute_force_counts_partial_injections() {
        // 3x3 admits sum_k C(3,k)^2 k! = 1 + 9 + 18 + 6 = 34 partial injections.
        fn count(rows: usize, cols: usize, i: usize, used: &mut Vec<bool>) -> usize {
            if i == rows {
                return 1;
            }
            let mut n = count(rows, cols, i + 1, used);
            for j in 0..cols {
                if !used[j] {
                    used[j] = true;
                    n += count(rows, cols, i + 1, used);
                    used[j] = false;
                }
            }
            n
        }
        assert_eq!(count(3, 3, 0, &mut vec![false; 3]), 34);
    }

    proptest! {
        #[test]
        fn exact_is_optimal(seed in any::<u64>(), rows in 1usize..=6, cols in 1usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_scores(&mut rng, rows, cols);
            let cfg = MatcherConfig::default();
            let got = exact_scores(&s, &cfg).unwrap();
            let (best, _) = brute_force_best(&s, cfg.min_score);
            let total: f64 = got.pairs.iter().map(|p| p.score).sum();
            prop_assert!((total - best).abs() < 1e-12);
            prop_assert!(got.is_injective());
        }

        #[test]
        fn solvers_never_repeat_an_index(seed in any::<u64>(), rows in 0usize..=9, cols in 0usize..=9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_scores(&mut rng, rows, cols);
            let cfg = MatcherConfig { min_score: -1.0, ..MatcherConfig::default() };
            prop_assert!(mutual_nn_scores(&s, &cfg).is_injective());
            prop_assert!(exact_scores(&s, &cfg).unwrap().is_injective());
            prop_assert!(sinkhorn_scores(&s, &cfg).unwrap().is_injective());
        }

        #[test]
        fn positive_scaling_keeps_pairs(seed in any::<u64>(), scale in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let b: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let sa: Vec<Vec<f64>> = a.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect();
            let sb: Vec<Vec<f64>> = b.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect();
            let cfg = MatcherConfig { min_score: 0.1, ..MatcherConfig::default() };
            let scaled = MatcherConfig { min_score: 0.1 * scale * scale, ..cfg };
            for solver in [Solver::MutualNn, Solver::Exact] {
                let c = MatcherConfig { solver, ..cfg };
                let sc = MatcherConfig { solver, ..scaled };
                prop_assert_eq!(
                    match_descriptors(&a, &b, &c).unwrap().index_pairs(),
                    match_descriptors(&sa, &sb, &sc).unwrap().index_pairs()
                );
            }
        }

        #[test]
        fn exact_is_symmetric(seed in any::<u64>(), rows in 1usize..=6, cols in 1usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_scores(&mut rng, rows, cols);
            let cfg = MatcherConfig::default();
            let ab = exact_scores(&s, &cfg).unwrap();
            let ba = exact_scores(&s.transposed(), &cfg).unwrap();
            prop_assert_eq!(ab.transposed().index_pairs(), ba.index_pairs());
        }

        #[test]
        fn sinkhorn_marginals(seed in any::<u64>(), rows in 1usize..=8, cols in 1usize..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_scores(&mut rng, rows, cols);
            let cfg = SinkhornConfig { iterations: 500, ..SinkhornConfig::default() };
            let plan = sinkhorn_log_plan(&s, &cfg).unwrap();
            for row in plan.iter().take(rows) {
                let mass: f64 = row.iter().map(|v| v.exp()).sum();
                prop_assert!((mass - 1.0).abs() < 1e-6, "row mass {}", mass);
            }
            for j in 0..cols {
                let mass: f64 = plan.iter().map(|r| r[j].exp()).sum();
                prop_assert!((mass - 1.0).abs() < 1e-6, "col mass {}", mass);
            }
        }
    }

    #[test]
    fn sinkhorn_examples() {
        let ident: Vec<Vec<f64>> = (0..5).map(|i| e(5, i)).collect();
        let cfg = MatcherConfig {
            solver: Solver::Sinkhorn,
            sinkhorn: SinkhornConfig {
                epsilon: 0.01,
                ..SinkhornConfig::default()
            },
            ..MatcherConfig::default()
        };
        let m = match_sinkhorn(&ident, &ident, &cfg).unwrap();
        assert_eq!(m.index_pairs(), (0..5).map(|i| (i, i)).collect::<Vec<_>>());

        // Row 1 is dissimilar to everything and goes to the dustbin.
        let s = ScoreMatrix::from_rows(&[vec![0.9, -0.2], vec![-0.5, -0.4]]).unwrap();
        let m = sinkhorn_scores(&s, &cfg).unwrap();
        assert_eq!(m.index_pairs(), vec![(0, 0)]);
        assert_eq!(m.unmatched_a, vec![1]);

        let nan = ScoreMatrix::from_rows(&[vec![f64::NAN]]).unwrap();
        assert!(sinkhorn_scores(&nan, &cfg).unwrap_err().is_validation());
    }

    #[test]
    fn sinkhorn_agrees_with_exact_on_clear_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = random_scores(&mut rng, 4, 4);
        for i in 0..4 {
            s.data[i * 4 + (i + 1) % 4] = 0.9 + 0.02 * i as f64;
        }
        let cfg = MatcherConfig {
            min_score: 0.0,
            sinkhorn: SinkhornConfig {
                epsilon: 1e-3,
                iterations: 200,
                dustbin_score: 0.0,
            },
            ..MatcherConfig::default()
        };
        assert_eq!(
            sinkhorn_scores(&s, &cfg).unwrap().index_pairs(),
            exact_scores(&s, &cfg).unwrap().index_pairs()
        );
    }

    #[test]
    fn domain_stats_hand_count() {
        use Domain::{Background as B, Semantic as S};
        let da = [S, S, B, B];
        let db = [S, B, S, B];
        let m = MatchSet::from_pairs(
            vec![
                MatchPair {
                    a: 0,
                    b: 0,
                    score: 1.0,
                },
                MatchPair {
                    a: 1,
                    b: 1,
                    score: 1.0,
                },
                MatchPair {
                    a: 2,
                    b: 3,
                    score: 1.0,
                },
                MatchPair {
                    a: 3,
                    b: 2,
                    score: 1.0,
                },
            ],
            4,
            4,
        );
        let st = match_domain_stats(&m, &da, &db).unwrap();
        assert_eq!((st.ss, st.sb, st.bb, st.bs), (0.25, 0.25, 0.25, 0.25));
        let only_bb = MatchSet::from_pairs(
            vec![MatchPair {
                a: 2,
                b: 3,
                score: 1.0,
            }],
            4,
            4,
        );
        assert_eq!(match_domain_stats(&only_bb, &da, &db).unwrap().bb, 1.0);
        let empty = match_domain_stats(&MatchSet::default(), &da, &db).unwrap();
        assert!(empty.empty && empty.total == 0);
    }
}
