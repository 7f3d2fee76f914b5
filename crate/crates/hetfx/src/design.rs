//! Sparse design matrices for the three supported archetypes.
//!
//! A [`DesignMatrix`] maps observations to unit effects. Three builders cover
//! the supported research designs:
//!
//! - [`build_block_design`]: grouped data with one intercept column per unit
//!   and, optionally, one slope-interaction column per unit (firm-level
//!   call-back designs and similar panel layouts);
//! - [`build_akm_design`]: two-way worker/firm layouts where each row carries
//!   one worker indicator and one firm indicator, identified on a connected
//!   component of the worker-firm mobility network;
//! - [`build_exposure_design`]: neighborhood-exposure layouts where entries
//!   are years of exposure and high-dimensional origin-destination controls
//!   are removed by within-cell differencing.
//!
//! Matrices are assembled from row-major triplets and compressed to CSR once
//! construction finishes; finished values are immutable and cheap to share
//! across threads.

use std::collections::{BTreeMap, HashMap, HashSet};


use crate::error::{Error, Result};
use crate::solve::probe_nonsingular;

/// What kind of unit a design column refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UnitKind {
    Firm,
    Worker,
    Neighborhood,
    Slope,
}

impl UnitKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            UnitKind::Firm => "firm",
            UnitKind::Worker => "worker",
            UnitKind::Neighborhood => "neighborhood",
            UnitKind::Slope => "slope",
        }
    }
}

/// Identity of one effect column: `(kind, unit, interaction)` is unique
/// across columns.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EffectLabel {
    pub kind: UnitKind,
    pub unit: String,
    pub interaction: Option<String>,
}

impl EffectLabel {
    pub fn new(kind: UnitKind, unit: impl Into<String>) -> Self {
        EffectLabel { kind, unit: unit.into(), interaction: None }
    }

    pub fn with_interaction(kind: UnitKind, unit: impl Into<String>, inter: impl Into<String>) -> Self {
        EffectLabel { kind, unit: unit.into(), interaction: Some(inter.into()) }
    }
}

impl std::fmt::Display for EffectLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.interaction {
            Some(x) => write!(f, "{}:{}:{}", self.kind.as_str(), self.unit, x),
            None => write!(f, "{}:{}", self.kind.as_str(), self.unit),
        }
    }
}

/// Identity of one observation row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ObsLabel {
    Index(u32),
    WorkerPeriod { worker: String, period: u32 },
    Child(String),
}

impl std::fmt::Display for ObsLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ObsLabel::Index(i) => write!(f, "{i}"),
            ObsLabel::WorkerPeriod { worker, period } => write!(f, "{worker}@{period}"),
            ObsLabel::Child(c) => write!(f, "{c}"),
        }
    }
}

/// Outcome vector; entries must be finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcomes(Vec<f64>);

impl Outcomes {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!("outcome at row {i} is not finite")));
        }
        Ok(Outcomes(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for Outcomes {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Normalization applied by [`finalize_identification`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizationRule {
    /// Drop the last column of the normalized unit family (firms when
    /// present, neighborhoods otherwise).
    DropLastFirm,
    /// Reparameterize the family's columns against the dropped one so that
    /// reported effects are relative to the family average.
    SumToZero,
}

/// Record of the normalization a finalized design carries.
#[derive(Debug, Clone)]
pub struct Normalization {
    pub rule: NormalizationRule,
    pub dropped: EffectLabel,
}

/// Block structure usable by the exact two-level solver: columns
/// `0..split` touch each row at most once (their Gram block is diagonal),
/// and the second block `split..p` is low-dimensional.
#[derive(Debug, Clone, Copy)]
pub struct TwoLevelSplit {
    pub split: usize,
}

/// Sparse n-by-p design matrix in CSR form with unit metadata.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    n_obs: usize,
    n_effects: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    col_labels: Vec<EffectLabel>,
    row_labels: Vec<ObsLabel>,
    finalized: bool,
    normalization: Option<Normalization>,
    two_level: Option<TwoLevelSplit>,
}

impl DesignMatrix {
    /// Assemble from row-major triplets. Each `(row, col)` pair may appear at
    /// most once; indices must be in range; labels must be unique.
    pub fn from_triplets(
        n_obs: usize,
        n_effects: usize,
        triplets: &[(usize, usize, f64)],
        col_labels: Vec<EffectLabel>,
        row_labels: Vec<ObsLabel>,
    ) -> Result<Self> {
        if col_labels.len() != n_effects {
            return Err(Error::input("column label count does not match n_effects"));
        }
        if row_labels.len() != n_obs {
            return Err(Error::input("row label count does not match n_obs"));
        }
        let mut seen = HashSet::new();
        for (i, lab) in col_labels.iter().enumerate() {
            if !seen.insert((lab.kind, lab.unit.clone(), lab.interaction.clone())) {
                return Err(Error::input(format!("duplicate effect label at column {i}: {lab}")));
            }
        }
        let mut counts = vec![0usize; n_obs];
        for &(r, c, v) in triplets {
            if r >= n_obs || c >= n_effects {
                return Err(Error::input(format!("triplet ({r},{c}) out of bounds for {n_obs}x{n_effects}")));
            }
            if !v.is_finite() {
                return Err(Error::input(format!("non-finite entry at ({r},{c})")));
            }
            counts[r] += 1;
        }
        let mut row_ptr = vec![0usize; n_obs + 1];
        for i in 0..n_obs {
            row_ptr[i + 1] = row_ptr[i] + counts[i];
        }
        let nnz = row_ptr[n_obs];
        let mut col_idx = vec![0usize; nnz];
        let mut values = vec![0f64; nnz];
        let mut cursor = row_ptr.clone();
        for &(r, c, v) in triplets {
            let k = cursor[r];
            col_idx[k] = c;
            values[k] = v;
            cursor[r] += 1;
        }
        // Sort within each row and reject duplicate (row, col) pairs.
        for i in 0..n_obs {
            let lo = row_ptr[i];
            let hi = row_ptr[i + 1];
            let mut pairs: Vec<(usize, f64)> =
                col_idx[lo..hi].iter().copied().zip(values[lo..hi].iter().copied()).collect();
            pairs.sort_by_key(|&(c, _)| c);
            for w in pairs.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::input(format!("duplicate entry at (row {i}, col {})", w[0].0)));
                }
            }
            for (k, (c, v)) in pairs.into_iter().enumerate() {
                col_idx[lo + k] = c;
                values[lo + k] = v;
            }
        }
        Ok(DesignMatrix {
            n_obs,
            n_effects,
            row_ptr,
            col_idx,
            values,
            col_labels,
            row_labels,
            finalized: false,
            normalization: None,
            two_level: None,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_effects(&self) -> usize {
        self.n_effects
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col_labels(&self) -> &[EffectLabel] {
        &self.col_labels
    }

    pub fn row_labels(&self) -> &[ObsLabel] {
        &self.row_labels
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn two_level(&self) -> Option<TwoLevelSplit> {
        self.two_level
    }

    pub(crate) fn set_two_level(&mut self, split: usize) {
        self.two_level = Some(TwoLevelSplit { split });
    }

    /// Mark finalized without normalization (identity-like designs from the
    /// simulators whose Gram is nonsingular by construction).
    pub(crate) fn mark_finalized(&mut self) {
        self.finalized = true;
    }

    /// Sparse row `i` as parallel column/value slices.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }

    /// y = Z v
    pub fn matvec(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.n_effects);
        debug_assert_eq!(out.len(), self.n_obs);
        for i in 0..self.n_obs {
            let (cols, vals) = self.row(i);
            let mut acc = 0.0;
            for (c, x) in cols.iter().zip(vals) {
                acc += v[*c] * x;
            }
            out[i] = acc;
        }
    }

    /// y = Z' u
    pub fn tmatvec(&self, u: &[f64], out: &mut [f64]) {
        debug_assert_eq!(u.len(), self.n_obs);
        debug_assert_eq!(out.len(), self.n_effects);
        out.fill(0.0);
        for i in 0..self.n_obs {
            let (cols, vals) = self.row(i);
            let ui = u[i];
            for (c, x) in cols.iter().zip(vals) {
                out[*c] += ui * x;
            }
        }
    }

    /// Row dot product z_i' v.
    pub fn row_dot(&self, i: usize, v: &[f64]) -> f64 {
        let (cols, vals) = self.row(i);
        cols.iter().zip(vals).map(|(c, x)| v[*c] * x).sum()
    }

    /// Diagonal of Z' diag(w) Z (pass `None` for unit weights).
    pub fn weighted_gram_diag(&self, w: Option<&[f64]>) -> Vec<f64> {
        let mut d = vec![0.0; self.n_effects];
        for i in 0..self.n_obs {
            let wi = w.map_or(1.0, |w| w[i]);
            let (cols, vals) = self.row(i);
            for (c, x) in cols.iter().zip(vals) {
                d[*c] += wi * x * x;
            }
        }
        d
    }

    /// out = Z' diag(w) Z v, using `scratch` of length n.
    pub fn weighted_gram_matvec(&self, w: Option<&[f64]>, v: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        self.matvec(v, scratch);
        if let Some(w) = w {
            for (s, wi) in scratch.iter_mut().zip(w) {
                *s *= wi;
            }
        }
        self.tmatvec(scratch, out);
    }

    /// True when every row has at most one nonzero, i.e. the Gram matrix is
    /// diagonal.
    pub fn gram_is_diagonal(&self) -> bool {
        (0..self.n_obs).all(|i| self.row_ptr[i + 1] - self.row_ptr[i] <= 1)
    }

    /// Dense copy (row-major) for oracle checks and dense solver paths.
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n_obs, self.n_effects);
        for i in 0..self.n_obs {
            let (cols, vals) = self.row(i);
            for (c, x) in cols.iter().zip(vals) {
                m[(i, *c)] = *x;
            }
        }
        m
    }

    /// Copy with column `drop` removed (labels shift accordingly).
    fn drop_column(&self, drop: usize) -> Result<DesignMatrix> {
        let mut triplets = Vec::with_capacity(self.nnz());
        for i in 0..self.n_obs {
            let (cols, vals) = self.row(i);
            for (c, v) in cols.iter().zip(vals) {
                if *c == drop {
                    continue;
                }
                let nc = if *c > drop { *c - 1 } else { *c };
                triplets.push((i, nc, *v));
            }
        }
        let mut labels = self.col_labels.clone();
        labels.remove(drop);
        let mut out = DesignMatrix::from_triplets(
            self.n_obs,
            self.n_effects - 1,
            &triplets,
            labels,
            self.row_labels.clone(),
        )?;
        if let Some(tl) = self.two_level {
            if drop >= tl.split {
                out.two_level = Some(tl);
            } else if tl.split > 0 {
                out.two_level = Some(TwoLevelSplit { split: tl.split - 1 });
            }
        }
        Ok(out)
    }

    /// Copy where every column of `family` (except `against`) is replaced by
    /// `col - col_against`, and `against` is removed: the sum-to-zero
    /// reparameterization of that unit family.
    fn reparameterize_sum_to_zero(&self, family: &[usize], against: usize) -> Result<DesignMatrix> {
        let fam: HashSet<usize> = family.iter().copied().collect();
        let mut triplets = Vec::with_capacity(self.nnz() * 2);
        for i in 0..self.n_obs {
            let (cols, vals) = self.row(i);
            let against_val = cols
                .iter()
                .zip(vals)
                .find(|(c, _)| **c == against)
                .map(|(_, v)| *v)
                .unwrap_or(0.0);
            let mut row_entries: BTreeMap<usize, f64> = BTreeMap::new();
            for (c, v) in cols.iter().zip(vals) {
                if *c == against {
                    continue;
                }
                row_entries.insert(*c, *v);
            }
            if against_val != 0.0 {
                for &c in &fam {
                    if c == against {
                        continue;
                    }
                    *row_entries.entry(c).or_insert(0.0) -= against_val;
                }
            }
            for (c, v) in row_entries {
                if v != 0.0 {
                    let nc = if c > against { c - 1 } else { c };
                    triplets.push((i, nc, v));
                }
            }
        }
        let mut labels = self.col_labels.clone();
        labels.remove(against);
        let mut out = DesignMatrix::from_triplets(
            self.n_obs,
            self.n_effects - 1,
            &triplets,
            labels,
            self.row_labels.clone(),
        )?;
        // The reparameterized family block can gain row fill, so only the
        // first-block property survives when the family sits in block two.
        if let Some(tl) = self.two_level {
            if family.iter().all(|&c| c >= tl.split) {
                out.two_level = Some(tl);
            }
        }
        Ok(out)
    }
}

/// Identity design (Z = I): the degenerate layout where each estimate is its
/// own observation, used by the stylized normal-means generator. Finalized by
/// construction since the Gram matrix is the identity.
pub fn identity_design(p: usize) -> DesignMatrix {
    let labels: Vec<EffectLabel> =
        (0..p).map(|j| EffectLabel::new(UnitKind::Firm, format!("u{j:06}"))).collect();
    let rows = (0..p as u32).map(ObsLabel::Index).collect();
    let triplets: Vec<(usize, usize, f64)> = (0..p).map(|j| (j, j, 1.0)).collect();
    let mut z = DesignMatrix::from_triplets(p, p, &triplets, labels, rows)
        .expect("identity design is always valid");
    z.mark_finalized();
    z
}

/// Bipartite worker-firm employment network.
#[derive(Debug, Clone)]
pub struct MobilityGraph {
    /// Edge per spell: (worker id, firm id, period).
    pub edges: Vec<(String, String, u32)>,
}

/// Node of the mobility graph. Ordering (workers before firms, then by id)
/// fixes the deterministic tie-break in component selection.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeId {
    Worker(String),
    Firm(String),
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NodeId::Worker(w) => write!(f, "worker:{w}"),
            NodeId::Firm(x) => write!(f, "firm:{x}"),
        }
    }
}

/// Partition of observation rows into differencing groups (rows that share
/// identical removed-covariate values, e.g. identical origin-destination
/// cells).
#[derive(Debug, Clone)]
pub struct DifferencingPlan {
    groups: Vec<Vec<usize>>,
}

impl DifferencingPlan {
    /// Build from disjoint groups; they must cover `0..n_obs` exactly.
    pub fn new(groups: Vec<Vec<usize>>, n_obs: usize) -> Result<Self> {
        let mut seen = vec![false; n_obs];
        let mut total = 0usize;
        for g in &groups {
            for &i in g {
                if i >= n_obs {
                    return Err(Error::input(format!("differencing plan row {i} out of bounds")));
                }
                if seen[i] {
                    return Err(Error::input(format!("differencing plan row {i} appears twice")));
                }
                seen[i] = true;
                total += 1;
            }
        }
        if total != n_obs {
            return Err(Error::input("differencing plan does not cover all observations"));
        }
        Ok(DifferencingPlan { groups })
    }

    /// Group rows by an arbitrary per-observation key.
    pub fn from_keys(keys: &[String]) -> Result<Self> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, k) in keys.iter().enumerate() {
            map.entry(k.as_str()).or_default().push(i);
        }
        DifferencingPlan::new(map.into_values().collect(), keys.len())
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }
}

/// One employment spell.
#[derive(Debug, Clone, PartialEq)]
pub struct Spell {
    pub worker: String,
    pub firm: String,
    pub period: u32,
}

/// One child's neighborhood exposures.
#[derive(Debug, Clone)]
pub struct ChildMoves {
    pub child: String,
    /// (neighborhood id, years of exposure); repeated neighborhoods are
    /// accumulated.
    pub exposures: Vec<(String, f64)>,
}

/// Grouped-data design: one intercept column per unit and, when a slope
/// covariate is supplied, one interaction column per unit. Column order is
/// all intercepts then all slopes, unit-sorted.
pub fn build_block_design(units: &[String], slope: Option<&[f64]>) -> Result<DesignMatrix> {
    if units.is_empty() {
        return Err(Error::input("no units"));
    }
    if let Some(s) = slope {
        if s.len() != units.len() {
            return Err(Error::input(format!(
                "slope covariate length {} does not match {} observations",
                s.len(),
                units.len()
            )));
        }
        if let Some(i) = s.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!("slope covariate at row {i} is not finite")));
        }
    }
    let mut ids: Vec<&String> = units.iter().collect();
    ids.sort();
    ids.dedup();
    let unit_col: HashMap<&String, usize> = ids.iter().enumerate().map(|(j, u)| (*u, j)).collect();
    let n_units = ids.len();

    if slope.is_some() {
        let mut counts = vec![0usize; n_units];
        for u in units {
            counts[unit_col[u]] += 1;
        }
        if let Some(j) = counts.iter().position(|&c| c < 2) {
            return Err(Error::input(format!("rank deficient block: unit {} has a single observation", ids[j])));
        }
    }

    let p = if slope.is_some() { 2 * n_units } else { n_units };
    let mut labels: Vec<EffectLabel> =
        ids.iter().map(|u| EffectLabel::new(UnitKind::Firm, (*u).clone())).collect();
    if slope.is_some() {
        labels.extend(
            ids.iter().map(|u| EffectLabel::with_interaction(UnitKind::Slope, (*u).clone(), "slope")),
        );
    }

    let mut triplets = Vec::with_capacity(units.len() * 2);
    for (i, u) in units.iter().enumerate() {
        let j = unit_col[u];
        triplets.push((i, j, 1.0));
        if let Some(s) = slope {
            if s[i] != 0.0 {
                triplets.push((i, n_units + j, s[i]));
            }
        }
    }
    let row_labels = (0..units.len() as u32).map(ObsLabel::Index).collect();
    DesignMatrix::from_triplets(units.len(), p, &triplets, labels, row_labels)
}

/// Two-way worker/firm design: one row per spell, worker indicator columns
/// followed by firm indicator columns, exactly two unit entries per row.
pub fn build_akm_design(spells: &[Spell]) -> Result<(DesignMatrix, MobilityGraph)> {
    if spells.is_empty() {
        return Err(Error::input("no spells"));
    }
    let mut seen = HashSet::new();
    for s in spells {
        if !seen.insert((s.worker.as_str(), s.period)) {
            return Err(Error::input(format!("duplicate spell: worker {} appears twice in period {}", s.worker, s.period)));
        }
    }
    let mut workers: Vec<&String> = spells.iter().map(|s| &s.worker).collect();
    workers.sort();
    workers.dedup();
    let mut firms: Vec<&String> = spells.iter().map(|s| &s.firm).collect();
    firms.sort();
    firms.dedup();
    let wcol: HashMap<&String, usize> = workers.iter().enumerate().map(|(j, w)| (*w, j)).collect();
    let fcol: HashMap<&String, usize> = firms.iter().enumerate().map(|(j, f)| (*f, j)).collect();
    let k = workers.len();
    let p = k + firms.len();

    let mut labels: Vec<EffectLabel> =
        workers.iter().map(|w| EffectLabel::new(UnitKind::Worker, (*w).clone())).collect();
    labels.extend(firms.iter().map(|f| EffectLabel::new(UnitKind::Firm, (*f).clone())));

    let mut triplets = Vec::with_capacity(spells.len() * 2);
    let mut row_labels = Vec::with_capacity(spells.len());
    for (i, s) in spells.iter().enumerate() {
        triplets.push((i, wcol[&s.worker], 1.0));
        triplets.push((i, k + fcol[&s.firm], 1.0));
        row_labels.push(ObsLabel::WorkerPeriod { worker: s.worker.clone(), period: s.period });
    }
    let mut z = DesignMatrix::from_triplets(spells.len(), p, &triplets, labels, row_labels)?;
    z.set_two_level(k);
    let graph = MobilityGraph {
        edges: spells.iter().map(|s| (s.worker.clone(), s.firm.clone(), s.period)).collect(),
    };
    Ok((z, graph))
}

/// Exposure design: one row per child, entries are years of exposure to each
/// neighborhood, plus a differencing plan grouping children by
/// origin-destination cell.
pub fn build_exposure_design(
    children: &[ChildMoves],
    od_cell: &[String],
) -> Result<(DesignMatrix, DifferencingPlan)> {
    if children.is_empty() {
        return Err(Error::input("no children"));
    }
    if od_cell.len() != children.len() {
        return Err(Error::input(format!(
            "od_cell length {} does not match {} children",
            od_cell.len(),
            children.len()
        )));
    }
    let mut nbhds: Vec<&String> = Vec::new();
    for c in children {
        for (nb, years) in &c.exposures {
            if !years.is_finite() || *years < 0.0 {
                return Err(Error::input(format!(
                    "negative or non-finite exposure {} for child {} in neighborhood {}",
                    years, c.child, nb
                )));
            }
            nbhds.push(nb);
        }
    }
    nbhds.sort();
    nbhds.dedup();
    let ncol: HashMap<&String, usize> = nbhds.iter().enumerate().map(|(j, n)| (*n, j)).collect();

    let labels: Vec<EffectLabel> =
        nbhds.iter().map(|n| EffectLabel::new(UnitKind::Neighborhood, (*n).clone())).collect();
    let mut triplets = Vec::new();
    let mut row_labels = Vec::with_capacity(children.len());
    for (i, c) in children.iter().enumerate() {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for (nb, years) in &c.exposures {
            *acc.entry(ncol[nb]).or_insert(0.0) += years;
        }
        for (j, v) in acc {
            if v != 0.0 {
                triplets.push((i, j, v));
            }
        }
        row_labels.push(ObsLabel::Child(c.child.clone()));
    }
    let z = DesignMatrix::from_triplets(children.len(), nbhds.len(), &triplets, labels, row_labels)?;
    let plan = DifferencingPlan::from_keys(od_cell)?;
    Ok((z, plan))
}

/// Largest connected component of the bipartite network, by node count; ties
/// broken by the component containing the smallest node id (workers order
/// before firms). Returns the kept nodes (sorted) and the indices of edges
/// with both endpoints kept.
pub fn largest_connected_component(graph: &MobilityGraph) -> Result<(Vec<NodeId>, Vec<usize>)> {
    if graph.edges.is_empty() {
        return Err(Error::input("empty mobility graph"));
    }
    let mut nodes: Vec<NodeId> = Vec::new();
    for (w, f, _) in &graph.edges {
        nodes.push(NodeId::Worker(w.clone()));
        nodes.push(NodeId::Firm(f.clone()));
    }
    nodes.sort();
    nodes.dedup();
    let index: HashMap<&NodeId, usize> = nodes.iter().enumerate().map(|(i, n)| (n, i)).collect();

    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for (w, f, _) in &graph.edges {
        let wi = index[&NodeId::Worker(w.clone())];
        let fi = index[&NodeId::Firm(f.clone())];
        adj[wi].push(fi);
        adj[fi].push(wi);
    }

    let mut comp = vec![usize::MAX; nodes.len()];
    let mut n_comp = 0usize;
    for start in 0..nodes.len() {
        if comp[start] != usize::MAX {
            continue;
        }
        let mut queue = vec![start];
        comp[start] = n_comp;
        while let Some(u) = queue.pop() {
            for &v in &adj[u] {
                if comp[v] == usize::MAX {
                    comp[v] = n_comp;
                    queue.push(v);
                }
            }
        }
        n_comp += 1;
    }

    let mut sizes = vec![0usize; n_comp];
    for &c in &comp {
        sizes[c] += 1;
    }
    // Nodes are sorted, so the first node of the best component is its
    // smallest id; scanning in order makes the size tie-break deterministic.
    let mut best = 0usize;
    for c in 1..n_comp {
        if sizes[c] > sizes[best] {
            best = c;
        }
    }

    let kept_nodes: Vec<NodeId> =
        nodes.iter().enumerate().filter(|(i, _)| comp[*i] == best).map(|(_, n)| n.clone()).collect();
    let kept: HashSet<&NodeId> = kept_nodes.iter().collect();
    let kept_edges: Vec<usize> = graph
        .edges
        .iter()
        .enumerate()
        .filter(|(_, (w, f, _))| {
            kept.contains(&NodeId::Worker(w.clone())) && kept.contains(&NodeId::Firm(f.clone()))
        })
        .map(|(i, _)| i)
        .collect();
    Ok((kept_nodes, kept_edges))
}

/// Enforce a normalization so the Gram matrix becomes nonsingular. Designs
/// that already pass the nonsingularity probe are returned unchanged. For
/// two-way designs the probe must be run on a single connected component,
/// otherwise one dropped column cannot restore full rank.
pub fn finalize_identification(z: DesignMatrix, rule: NormalizationRule) -> Result<DesignMatrix> {
    if probe_nonsingular(&z) {
        let mut z = z;
        z.finalized = true;
        return Ok(z);
    }
    // Normalize the trailing unit family: firms when present, neighborhoods
    // otherwise.
    let family_kind = if z.col_labels.iter().any(|l| l.kind == UnitKind::Firm) {
        UnitKind::Firm
    } else if z.col_labels.iter().any(|l| l.kind == UnitKind::Neighborhood) {
        UnitKind::Neighborhood
    } else {
        return Err(Error::numerical("unidentified design: no firm or neighborhood column to normalize"));
    };
    let family: Vec<usize> = z
        .col_labels
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind == family_kind)
        .map(|(j, _)| j)
        .collect();
    let last = *family.last().expect("family is nonempty");
    let dropped = z.col_labels[last].clone();
    let mut out = match rule {
        NormalizationRule::DropLastFirm => z.drop_column(last)?,
        NormalizationRule::SumToZero => z.reparameterize_sum_to_zero(&family, last)?,
    };
    if !probe_nonsingular(&out) {
        return Err(Error::numerical("unidentified design: Gram matrix singular after normalization"));
    }
    out.finalized = true;
    out.normalization = Some(Normalization { rule, dropped });
    Ok(out)
}

/// Within-group demeaning of both the design and the outcomes. Removes any
/// covariate that is constant within every group; idempotent.
pub fn apply_differencing(
    z: &DesignMatrix,
    y: &Outcomes,
    plan: &DifferencingPlan,
) -> Result<(DesignMatrix, Outcomes)> {
    if y.len() != z.n_obs {
        return Err(Error::input("outcome length does not match design rows"));
    }
    let mut ytil = y.values().to_vec();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(z.nnz() * 2);
    for group in plan.groups() {
        let m = group.len() as f64;
        let ymean = group.iter().map(|&i| y.values()[i]).sum::<f64>() / m;
        let mut colmean: BTreeMap<usize, f64> = BTreeMap::new();
        for &i in group {
            let (cols, vals) = z.row(i);
            for (c, v) in cols.iter().zip(vals) {
                *colmean.entry(*c).or_insert(0.0) += v / m;
            }
        }
        for &i in group {
            ytil[i] = y.values()[i] - ymean;
            let (cols, vals) = z.row(i);
            let mut row: BTreeMap<usize, f64> = colmean.iter().map(|(c, v)| (*c, -v)).collect();
            for (c, v) in cols.iter().zip(vals) {
                *row.entry(*c).or_insert(0.0) += v;
            }
            for (c, v) in row {
                if v != 0.0 {
                    triplets.push((i, c, v));
                }
            }
        }
    }
    let out = DesignMatrix::from_triplets(
        z.n_obs,
        z.n_effects,
        &triplets,
        z.col_labels.clone(),
        z.row_labels.clone(),
    )?;
    Ok((out, Outcomes::new(ytil)?))
}
